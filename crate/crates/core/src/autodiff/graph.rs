use std::fmt::Write as _;

use super::kernels::{self, ConvGeom};
use super::tensor::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    /// Constant input; never receives a gradient.
    Input,
    /// Differentiable leaf.
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    L1Norm(Var),
    RowL2Norm(Var),
    Sqrt(Var),
    Log(Var),
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Bilinear {
        map: Var,
        coords: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L1Norm(..) => "l1_norm",
            Op::RowL2Norm(..) => "row_l2_norm",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Bilinear { .. } => "bilinear_sample",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::L1Norm(a)
            | Op::RowL2Norm(a)
            | Op::Sqrt(a)
            | Op::Log(a) => vec![*a],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::InstanceNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Gather { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Bilinear { map, coords } => vec![*map, *coords],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every [`Op::Param`] leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a parameter leaf; zeros when the seed does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("gradient requested for a non-parameter node")
    }
}

const NORM_EPS: f64 = 1e-5;

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// index order is a topological order of the DAG.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<S: Into<String>>(op: &'static str, detail: S) -> Error {
    Error::Shape { op, detail: detail.into() }
}

impl<T: Real> Graph<T> {
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

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !matches!(op, Op::Input | Op::Param) {
            let inputs_finite = op.inputs().iter().all(|v| self.nodes[v.0].value.all_finite());
            if inputs_finite && !value.all_finite() {
                return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
            }
        }
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Param, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(value, op)
    }

    fn map(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let value = Tensor::new(self.shape(a), self.data(a).iter().map(|&x| f(x)).collect())?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.map(Op::Scale(a, s), a, |x| x * s)
    }

    /// Adds a bias vector: along columns of an `[N×F]` matrix (`bias [F]`),
    /// or per channel of a `[C×H×W]` map (`bias [C]`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let blen = self.value(bias).numel();
        let b = self.data(bias).to_vec();
        let mut out = self.data(x).to_vec();
        match shape.len() {
            2 if blen == shape[1] => {
                for row in out.chunks_mut(shape[1]) {
                    row.iter_mut().zip(&b).for_each(|(o, &bv)| *o += bv);
                }
            }
            3 if blen == shape[0] => {
                let plane = shape[1] * shape[2];
                for (c, chunk) in out.chunks_mut(plane.max(1)).enumerate().take(shape[0]) {
                    chunk.iter_mut().for_each(|o| *o += b[c]);
                }
            }
            _ => {
                return Err(shape_err(
                    "add_bias",
                    format!("bias {:?} does not fit {:?}", self.shape(bias), shape),
                ))
            }
        }
        self.push(Tensor::new(&shape, out)?, Op::AddBias(x, bias))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b))
    }

    /// Cross-correlation of `input [Cin×H×W]` with `weight [Cout×Cin×k×k]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] {
            return Err(shape_err("conv2d", format!("input {si:?}, weight {sw:?}")));
        }
        let geom = ConvGeom::new(si[0], si[1], si[2], sw[2], stride, pad).ok_or_else(|| {
            shape_err("conv2d", format!("input {si:?} too small for kernel {} stride {stride}", sw[2]))
        })?;
        let cols = kernels::im2col(self.data(input), &geom);
        let cout = sw[0];
        let mut out = vec![T::zero(); cout * geom.cols()];
        matmul_into(cout, geom.rows(), geom.cols(), self.data(weight), false, &cols, false, &mut out, false);
        let value = Tensor::new(&[cout, geom.ho, geom.wo], out)?;
        self.push(value, Op::Conv2d { input, weight, geom, cols })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Relu(a), a, |x| if x > T::zero() { x } else { T::zero() })
    }

    /// `max(x, 0)`; the derivative at exactly zero is taken as 0.
    pub fn max_with_zero(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    /// Per-channel normalization over the spatial extent of one `[C×H×W]`
    /// sample, followed by the affine map `gamma·x̂ + beta`.
    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || self.value(gamma).numel() != s[0] || self.value(beta).numel() != s[0] {
            return Err(shape_err(
                "instance_norm",
                format!("input {s:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let plane = s[1] * s[2];
        let eps = T::from_f64_lossy(NORM_EPS);
        let x = self.data(input);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); s[0]];
        let mut out = vec![T::zero(); x.len()];
        for c in 0..s[0] {
            let xs = &x[c * plane..(c + 1) * plane];
            let mean = T::from_f64_lossy(sum64(xs) / plane as f64);
            let var = xs.iter().map(|&v| ((v - mean) * (v - mean)).as_f64()).sum::<f64>() / plane as f64;
            let is = T::one() / (T::from_f64_lossy(var) + eps).sqrt();
            inv_std[c] = is;
            for i in 0..plane {
                let xh = (xs[i] - mean) * is;
                xhat[c * plane + i] = xh;
                out[c * plane + i] = g[c] * xh + b[c];
            }
        }
        self.push(Tensor::new(&s, out)?, Op::InstanceNorm { input, gamma, beta, xhat, inv_std })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.data(a).iter().copied().sum::<T>() / T::from_usize(n).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// `Σ |x|` over all entries.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|x| x.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1Norm(a))
    }

    /// Euclidean norm of each row of an `[N×D]` matrix, giving `[N]`.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("row_l2_norm", format!("expected a matrix, got {s:?}")));
        }
        let out = self
            .data(a)
            .chunks(s[1].max(1))
            .take(s[0])
            .map(|row| row.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        self.push(Tensor::new(&[s[0]], out)?, Op::RowL2Norm(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Sqrt(a), a, |x| x.sqrt())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(Op::Log(a), a, |x| x.ln())
    }

    /// `out[k] = input.flat[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(input).numel();
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("index {bad} out of range for {n} elements")));
        }
        let src = self.data(input);
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, out).map_err(|_| {
            shape_err("gather", format!("{} indices do not fill shape {shape:?}", index.len()))
        })?;
        self.push(value, Op::Gather { input, index })
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| shape_err("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} does not match {first:?} off axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        self.push(value, Op::Concat { inputs: inputs.to_vec(), axis })
    }

    /// Bilinear interpolation of `map [C×H×W]` at `coords [N×2]` (`x` = column,
    /// `y` = row), giving `[N×C]`. Coordinates outside the grid are clamped to
    /// it and get zero gradient along the clamped axis.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (sm, sc) = (self.shape(map).to_vec(), self.shape(coords).to_vec());
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 {
            return Err(shape_err("bilinear_sample", format!("map {sm:?}, coords {sc:?}")));
        }
        if !self.value(coords).all_finite() {
            return Err(Error::NonFinite("bilinear_sample coordinates".into()));
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let n = sc[0];
        let m = self.data(map);
        let xy = self.data(coords);
        let mut out = vec![T::zero(); n * c];
        for p in 0..n {
            let ax = kernels::axis(xy[2 * p], w);
            let ay = kernels::axis(xy[2 * p + 1], h);
            let one = T::one();
            let (w00, w01) = ((one - ax.frac) * (one - ay.frac), ax.frac * (one - ay.frac));
            let (w10, w11) = ((one - ax.frac) * ay.frac, ax.frac * ay.frac);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = m[base + ay.i0 * w + ax.i0];
                let v01 = m[base + ay.i0 * w + ax.i1];
                let v10 = m[base + ay.i1 * w + ax.i0];
                let v11 = m[base + ay.i1 * w + ax.i1];
                out[p * c + ch] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
            }
        }
        self.push(Tensor::new(&[n, c], out)?, Op::Bilinear { map, coords })
    }

    /// Reverse sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients<T>> {
        if self.value(seed).numel() != 1 {
            return Err(shape_err("backward", format!("seed must be scalar, got {:?}", self.shape(seed))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(vec![T::one()]);
        let mut result: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                result[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param = node.op {
                result[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: result })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, &gi), &ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q);
                }
                let shape = node.value.shape();
                if let Some(gb) = self.acc(grads, *b) {
                    if shape.len() == 2 {
                        for row in g.chunks(shape[1].max(1)) {
                            gb.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                        }
                    } else {
                        let plane = (shape[1] * shape[2]).max(1);
                        for (c, chunk) in g.chunks(plane).enumerate().take(shape[0]) {
                            gb[c] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    matmul_into(m, n, k, g, false, vb, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    matmul_into(k, m, n, va, true, g, false, gb, true);
                }
            }
            Op::Conv2d { input, weight, geom, cols } => {
                let cout = self.shape(*weight)[0];
                if let Some(gw) = self.acc(grads, *weight) {
                    matmul_into(cout, geom.cols(), geom.rows(), g, false, cols, true, gw, true);
                }
                if self.nodes[input.0].needs_grad {
                    let mut gcols = vec![T::zero(); geom.rows() * geom.cols()];
                    matmul_into(
                        geom.rows(),
                        cout,
                        geom.cols(),
                        self.data(*weight),
                        true,
                        g,
                        false,
                        &mut gcols,
                        false,
                    );
                    if let Some(gi) = self.acc(grads, *input) {
                        kernels::col2im_add(&gcols, geom, gi);
                    }
                }
            }
            Op::Relu(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        if yi > T::zero() {
                            *x += gi;
                        }
                    }
                }
            }
            Op::InstanceNorm { input, gamma, beta, xhat, inv_std } => {
                let s = node.value.shape();
                let plane = s[1] * s[2];
                let gam = self.data(*gamma);
                if let Some(gg) = self.acc(grads, *gamma) {
                    for c in 0..s[0] {
                        let r = c * plane..(c + 1) * plane;
                        gg[c] += T::from_f64_lossy(dot64(&g[r.clone()], &xhat[r]));
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for c in 0..s[0] {
                        gb[c] += T::from_f64_lossy(sum64(&g[c * plane..(c + 1) * plane]));
                    }
                }
                if let Some(gx) = self.acc(grads, *input) {
                    for c in 0..s[0] {
                        let r = c * plane..(c + 1) * plane;
                        let (gc, xh) = (&g[r.clone()], &xhat[r.clone()]);
                        // reductions in f64: the two mean terms nearly cancel
                        let mean_g = sum64(gc) / plane as f64;
                        let mean_gx = dot64(gc, xh) / plane as f64;
                        let k = inv_std[c].as_f64() * gam[c].as_f64();
                        for (i, out) in gx[r].iter_mut().enumerate() {
                            *out += T::from_f64_lossy(k * (gc[i].as_f64() - mean_g - xh[i].as_f64() * mean_gx));
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel()).unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::L1Norm(a) => {
                let va = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &v) in ga.iter_mut().zip(va) {
                        if v > T::zero() {
                            *x += g[0];
                        } else if v < T::zero() {
                            *x = *x - g[0];
                        }
                    }
                }
            }
            Op::RowL2Norm(a) => {
                let d = self.shape(*a)[1].max(1);
                let va = self.data(*a);
                let norms = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, (&nr, &gr)) in norms.iter().zip(g).enumerate() {
                        if nr > T::zero() {
                            for j in 0..d {
                                ga[r * d + j] += gr * va[r * d + j] / nr;
                            }
                        }
                    }
                }
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    let two = T::one() + T::one();
                    for ((x, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        if yi > T::zero() {
                            *x += gi / (two * yi);
                        }
                    }
                }
            }
            Op::Log(a) => {
                let va = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, &gi), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += gi / v;
                    }
                }
            }
            Op::Gather { input, index } => {
                if let Some(gi) = self.acc(grads, *input) {
                    for (&i, &gk) in index.iter().zip(g) {
                        gi[i] += gk;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let block = self.shape(v)[*axis] * inner;
                        if let Some(gv) = self.acc(grads, v) {
                            gv[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(&g[offset..offset + block])
                                .for_each(|(p, &q)| *p += q);
                        }
                        offset += block;
                    }
                }
            }
            Op::Bilinear { map, coords } => {
                let sm = self.shape(*map);
                let (c, h, w) = (sm[0], sm[1], sm[2]);
                let m = self.data(*map);
                let xy = self.data(*coords);
                let n = xy.len() / 2;
                let one = T::one();
                if self.nodes[coords.0].needs_grad {
                    let mut gxy = vec![T::zero(); 2 * n];
                    for p in 0..n {
                        let ax = kernels::axis(xy[2 * p], w);
                        let ay = kernels::axis(xy[2 * p + 1], h);
                        let (mut dx, mut dy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let base = ch * h * w;
                            let v00 = m[base + ay.i0 * w + ax.i0];
                            let v01 = m[base + ay.i0 * w + ax.i1];
                            let v10 = m[base + ay.i1 * w + ax.i0];
                            let v11 = m[base + ay.i1 * w + ax.i1];
                            let gk = g[p * c + ch];
                            dx += gk * ((one - ay.frac) * (v01 - v00) + ay.frac * (v11 - v10));
                            dy += gk * ((one - ax.frac) * (v10 - v00) + ax.frac * (v11 - v01));
                        }
                        gxy[2 * p] = if ax.clamped { T::zero() } else { dx };
                        gxy[2 * p + 1] = if ay.clamped { T::zero() } else { dy };
                    }
                    if let Some(gc) = self.acc(grads, *coords) {
                        gc.iter_mut().zip(&gxy).for_each(|(p, &q)| *p += q);
                    }
                }
                if let Some(gm) = self.acc(grads, *map) {
                    for p in 0..n {
                        let ax = kernels::axis(xy[2 * p], w);
                        let ay = kernels::axis(xy[2 * p + 1], h);
                        let (w00, w01) = ((one - ax.frac) * (one - ay.frac), ax.frac * (one - ay.frac));
                        let (w10, w11) = ((one - ax.frac) * ay.frac, ax.frac * ay.frac);
                        for ch in 0..c {
                            let base = ch * h * w;
                            let gk = g[p * c + ch];
                            gm[base + ay.i0 * w + ax.i0] += gk * w00;
                            gm[base + ay.i0 * w + ax.i1] += gk * w01;
                            gm[base + ay.i1 * w + ax.i0] += gk * w10;
                            gm[base + ay.i1 * w + ax.i1] += gk * w11;
                        }
                    }
                }
            }
        }
    }

    /// Text rendering of the tape, one node per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = node.op.inputs().iter().map(|v| format!("%{}", v.0)).collect();
            let _ = writeln!(
                out,
                "%{i} = {}({}) : {:?}{}",
                node.op.name(),
                inputs.join(", "),
                node.value.shape(),
                if node.needs_grad { " grad" } else { "" }
            );
        }
        out
    }
}

fn sum64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

fn dot64<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}
