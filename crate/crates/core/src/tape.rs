//! A small reverse-mode automatic differentiation tape over row-major 2-D
//! arrays.
//!
//! Every value is an `Array2`; vectors are `n x 1` or `1 x n` and scalars are
//! `1 x 1`. Binary elementwise operations broadcast like NumPy over axes of
//! length one. A fresh [`Tape`] is built for every forward pass; parameters
//! enter through [`Tape::param`] and their gradients come back from
//! [`Tape::backward`] keyed by [`ParamId`].

use std::collections::HashMap;
use std::fmt::{Debug, Display};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;
use rand::Rng;

use crate::params::{ParamId, ParamStore};

/// Floating point element type usable on the tape.
pub trait Real: NdFloat + FromPrimitive + Default + Debug + Display {
    const BYTES: usize;

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Element-wise `exp` in place.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    /// Element-wise logistic function in place.
    fn sigmoid_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = sigmoid(*x);
        }
    }
}

/// `exp` for f32 by range reduction and a degree-6 polynomial, written
/// branch-free so the loops over slices vectorize. Relative error ~1e-7.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.0).min(88.0);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    // the low mantissa bits of `t` hold `n` offset by 2^22
    let bits = t.to_bits().wrapping_sub(0x4B40_0000).wrapping_add(127) << 23;
    y * f32::from_bits(bits)
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }

    fn sigmoid_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = 1.0 / (1.0 + exp_f32(-*x));
        }
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `alpha * a * b^T`
    MatMulNT(Var, Var, T),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        inv_std: Array1<T>,
    },
    ColumnNorm {
        x: Var,
        inv_std: Array1<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    GroupMax(Var, Vec<usize>),
    RowMix(Var, Vec<(usize, usize, T)>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: Vec<(ParamId, Array2<T>)>,
}

impl<T: Real> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Array2<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Array2<T>)> {
        self.params
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to<T: Real>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn zip_broadcast<T: Real>(
    a: &Array2<T>,
    b: &Array2<T>,
    f: impl Fn(T, T) -> T,
) -> Array2<T> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast a");
    let bv = b.broadcast(shape).expect("broadcast b");
    let mut out = Array2::zeros(shape);
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x), stable on both tails
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "not a scalar node");
        a[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, x: T) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// A leaf that receives a gradient but is not tied to a parameter.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts a parameter once per tape; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Param(id), trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `alpha * a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: T) -> Var {
        let mut value = self.value(a).dot(&self.value(b).t());
        if alpha != T::one() {
            value.mapv_inplace(|x| x * alpha);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNT(a, b, alpha), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut value = self.value(a).as_standard_layout().into_owned();
        T::sigmoid_in_place(value.as_slice_mut().expect("standard layout"));
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let mut value = self.value(a).as_standard_layout().into_owned();
        T::exp_in_place(value.as_slice_mut().expect("standard layout"));
        let ng = self.ng(a);
        self.push(value, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.ln());
        let ng = self.ng(a);
        self.push(value, Op::Log(a), ng)
    }

    /// `log(1 + exp(a))`
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        let ng = self.ng(a);
        self.push(value, Op::Softplus(a), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).mapv(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(value, Op::Clamp(a, lo, hi), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).as_standard_layout().into_owned();
        for mut row in value.rows_mut() {
            let row = row.as_slice_mut().expect("contiguous row");
            let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            for x in row.iter_mut() {
                *x = *x - m;
            }
            T::exp_in_place(row);
            let inv = T::one() / row.iter().fold(T::zero(), |s, &x| s + x);
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let cols = T::of(x.ncols() as f64);
        let mut value = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in value.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / cols;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(T::zero(), |acc, &v| acc + v * v) / cols;
            *is = T::one() / (var + eps).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let ng = self.ng(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Standardizes every column over the rows.
    pub fn norm_cols(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let rows = T::of(x.nrows() as f64);
        let mut value = x.clone();
        let mut inv_std = Array1::zeros(x.ncols());
        for (mut col, is) in value.columns_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = col.sum() / rows;
            col.mapv_inplace(|v| v - mean);
            let var = col.fold(T::zero(), |acc, &v| acc + v * v) / rows;
            *is = T::one() / (var + eps).sqrt();
            let s = *is;
            col.mapv_inplace(|v| v * s);
        }
        let ng = self.ng(a);
        self.push(value, Op::ColumnNorm { x: a, inv_std }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), indices);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, indices.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    /// Column-wise max over consecutive row groups of size `group`.
    pub fn group_max(&mut self, a: Var, group: usize) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert!(group > 0 && rows % group == 0, "rows must divide into groups");
        let out_rows = rows / group;
        let mut value = Array2::zeros((out_rows, cols));
        let mut arg = vec![0usize; out_rows * cols];
        for g in 0..out_rows {
            for c in 0..cols {
                let mut best = g * group;
                let mut bv = x[[best, c]];
                for r in g * group + 1..(g + 1) * group {
                    if x[[r, c]] > bv {
                        bv = x[[r, c]];
                        best = r;
                    }
                }
                value[[g, c]] = bv;
                arg[g * cols + c] = best;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::GroupMax(a, arg), ng)
    }

    /// Sparse row mixing: `out[o] += w * a[i]` for every `(o, i, w)`.
    pub fn row_mix(&mut self, a: Var, out_rows: usize, entries: Vec<(usize, usize, T)>) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((out_rows, x.ncols()));
        for &(o, i, w) in &entries {
            value.row_mut(o).scaled_add(w, &x.row(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::RowMix(a, entries), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums over rows, giving `1 x cols`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Sums over columns, giving `rows x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let (r, c) = self.shape(a);
        let mask = Array2::from_shape_fn((r, c), |_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut params = Vec::new();

        fn acc<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    params.push((*id, g.clone()));
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b, alpha) => {
                    if ng(*a) {
                        let mut ga = g.dot(val(*b));
                        if *alpha != T::one() {
                            ga.mapv_inplace(|x| x * *alpha);
                        }
                        acc(&mut grads, *a, ga);
                    }
                    if ng(*b) {
                        let mut gb = g.t().dot(val(*a));
                        if *alpha != T::one() {
                            gb.mapv_inplace(|x| x * *alpha);
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, reduce_to(g, val(*b).dim()));
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, reduce_to(g.mapv(|x| -x), val(*b).dim()));
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        let ga = zip_broadcast(&g, val(*b), |x, y| x * y);
                        acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    }
                    if ng(*b) {
                        let gb = zip_broadcast(&g, val(*a), |x, y| x * y);
                        acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                    }
                }
                Op::Div(a, b) => {
                    if ng(*a) {
                        let ga = zip_broadcast(&g, val(*b), |x, y| x / y);
                        acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    }
                    if ng(*b) {
                        // d(a/b)/db = -out / b
                        let t = zip_broadcast(&g, &node.value, |x, o| -x * o);
                        let gb = zip_broadcast(&t, val(*b), |x, y| x / y);
                        acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.mapv(|x| x * *c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(val(*a))
                        .for_each(|d, &x| {
                            if x <= T::zero() {
                                *d = T::zero()
                            }
                        });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &s| *d = *d * s * (T::one() - s));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let mut ga = g;
                    ga *= &node.value;
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let mut ga = g;
                    ga /= val(*a);
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(val(*a))
                        .for_each(|d, &x| *d = *d * sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| {
                        if x < *lo || x > *hi {
                            *d = T::zero()
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut gr, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let (Some(gs), Some(ys)) = (gr.as_slice_mut(), yr.as_slice()) else {
                            let dot = gr.iter().zip(yr.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                            Zip::from(&mut gr).and(&yr).for_each(|d, &yv| *d = yv * (*d - dot));
                            continue;
                        };
                        let dot = gs.iter().zip(ys).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for (d, &yv) in gs.iter_mut().zip(ys) {
                            *d = yv * (*d - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &node.value;
                    let cols = T::of(xhat.ncols() as f64);
                    let mut ga = g;
                    for ((mut gr, xr), &is) in
                        ga.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std.iter())
                    {
                        let mean_g = gr.sum() / cols;
                        let mean_gx = gr
                            .iter()
                            .zip(xr.iter())
                            .fold(T::zero(), |s, (&a, &b)| s + a * b)
                            / cols;
                        Zip::from(&mut gr)
                            .and(&xr)
                            .for_each(|d, &xh| *d = is * (*d - mean_g - xh * mean_gx));
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::ColumnNorm { x, inv_std } => {
                    let xhat = &node.value;
                    let rows = T::of(xhat.nrows() as f64);
                    let mut ga = g;
                    for ((mut gc, xc), &is) in
                        ga.columns_mut().into_iter().zip(xhat.columns()).zip(inv_std.iter())
                    {
                        let mean_g = gc.sum() / rows;
                        let mean_gx = gc
                            .iter()
                            .zip(xc.iter())
                            .fold(T::zero(), |s, (&a, &b)| s + a * b)
                            / rows;
                        Zip::from(&mut gc)
                            .and(&xc)
                            .for_each(|d, &xh| *d = is * (*d - mean_g - xh * mean_gx));
                    }
                    acc(&mut grads, *x, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if ng(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        if ng(p) {
                            acc(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GroupMax(a, arg) => {
                    let cols = g.ncols();
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (flat, &r) in arg.iter().enumerate() {
                        let (o, c) = (flat / cols, flat % cols);
                        ga[[r, c]] += g[[o, c]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowMix(a, entries) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for &(o, i, w) in entries {
                        ga.row_mut(i).scaled_add(w, &g.row(o));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), s));
                }
                Op::SumRows(a) => {
                    let ga = g.broadcast(val(*a).dim()).expect("broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(val(*a).dim()).expect("broadcast").to_owned();
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Grads {
            nodes: grads,
            params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(x) * r))/dx for a random probe r.
    fn check_unary(x0: Array2<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.input(x0.clone());
        let y = f(&mut tape, x);
        let probe = Array2::from_shape_fn(tape.shape(y), |_| rng.random::<f64>() - 0.5);
        let p = tape.constant(probe.clone());
        let prod = tape.mul(y, p);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);
        let g = grads.wrt(x).unwrap().clone();
        let eval = |xv: &Array2<f64>| {
            let mut t = Tape::new();
            let x = t.input(xv.clone());
            let y = f(&mut t, x);
            (t.value(y) * &probe).sum()
        };
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let mut xp = x0.clone();
            xp[[r, c]] += h;
            let mut xm = x0.clone();
            xm[[r, c]] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let an = g[[r, c]];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!(
                (fd - an).abs() / scale < 1e-5,
                "grad mismatch at ({r},{c}): analytic {an} vs fd {fd}"
            );
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((r, c), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn elementwise_gradients() {
        let x = rand_mat(3, 4, 1);
        check_unary(x.clone(), |t, v| t.sigmoid(v));
        check_unary(x.clone(), |t, v| t.exp(v));
        check_unary(x.clone(), |t, v| t.softplus(v));
        check_unary(x.mapv(|v| v.abs() + 0.5), |t, v| t.log(v));
        check_unary(x.mapv(|v| v + 0.01), |t, v| t.relu(v));
        check_unary(x.clone(), |t, v| t.clamp(v, -0.5, 0.5));
        check_unary(x.clone(), |t, v| {
            let s = t.scale(v, 3.0);
            t.add_scalar(s, 1.0)
        });
    }

    #[test]
    fn broadcast_gradients() {
        let x = rand_mat(4, 3, 2);
        let row = rand_mat(1, 3, 3);
        let col = rand_mat(4, 1, 4).mapv(|v| v + 2.0);
        check_unary(x.clone(), |t, v| {
            let b = t.input(row.clone());
            t.add(v, b)
        });
        check_unary(row.clone(), |t, v| {
            let a = t.constant(x.clone());
            t.mul(a, v)
        });
        check_unary(col.clone(), |t, v| {
            let a = t.constant(x.clone());
            t.div(a, v)
        });
        check_unary(x.clone(), |t, v| {
            let c = t.constant(col.clone());
            t.sub(c, v)
        });
    }

    #[test]
    fn matrix_gradients() {
        let a = rand_mat(3, 5, 5);
        let b = rand_mat(5, 2, 6);
        let bt = rand_mat(4, 5, 7);
        check_unary(a.clone(), |t, v| {
            let w = t.constant(b.clone());
            t.matmul(v, w)
        });
        check_unary(b.clone(), |t, v| {
            let w = t.constant(a.clone());
            t.matmul(w, v)
        });
        check_unary(a.clone(), |t, v| {
            let w = t.constant(bt.clone());
            t.matmul_nt(v, w, 0.5)
        });
        check_unary(bt.clone(), |t, v| {
            let w = t.constant(a.clone());
            t.matmul_nt(w, v, 0.5)
        });
        check_unary(a.clone(), |t, v| t.transpose(v));
    }

    #[test]
    fn structural_gradients() {
        let a = rand_mat(6, 4, 8);
        check_unary(a.clone(), |t, v| t.softmax_rows(v));
        check_unary(a.clone(), |t, v| t.layer_norm_rows(v, 1e-5));
        check_unary(a.clone(), |t, v| t.norm_cols(v, 1e-5));
        check_unary(a.clone(), |t, v| t.group_max(v, 3));
        check_unary(a.clone(), |t, v| t.gather_rows(v, &[5, 0, 0, 2]));
        check_unary(a.clone(), |t, v| t.slice_cols(v, 1, 2));
        check_unary(a.clone(), |t, v| {
            let w = t.scale(v, 2.0);
            t.concat_cols(&[v, w])
        });
        check_unary(a.clone(), |t, v| {
            let w = t.gather_rows(v, &[1]);
            t.concat_rows(&[w, v])
        });
        check_unary(a.clone(), |t, v| {
            t.row_mix(v, 2, vec![(0, 1, 0.25), (0, 3, 0.75), (1, 5, 2.0)])
        });
        check_unary(a.clone(), |t, v| t.sum_rows(v));
        check_unary(a.clone(), |t, v| t.sum_cols(v));
        check_unary(a, |t, v| t.mean_all(v));
    }

    #[test]
    fn fast_f32_exp_is_accurate() {
        let xs: Vec<f32> = (-800..=800).map(|i| i as f32 * 0.1).collect();
        let mut ys = xs.clone();
        f32::exp_in_place(&mut ys);
        for (x, y) in xs.iter().zip(&ys) {
            let exact = (*x as f64).exp();
            assert!(((*y as f64) - exact).abs() <= 3e-7 * exact, "exp({x}) = {y} vs {exact}");
        }
        let mut big = [100.0f32, -100.0];
        f32::sigmoid_in_place(&mut big);
        assert_eq!(big[0], 1.0);
        assert!(big[1] >= 0.0 && big[1] < 1e-37);
    }

    #[test]
    fn softmax_rows_are_normalized() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]]);
        let y = t.softmax_rows(x);
        for row in t.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((t.value(y)[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.input(array![[2.0]]);
        let y = t.mul(x, x);
        let z = t.add(y, x);
        let g = t.backward(z);
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let x = t.input(array![[3.0, 4.0]]);
        let y = t.mul(c, x);
        let s = t.sum_all(y);
        let g = t.backward(s);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &array![[1.0, 2.0]]);
    }
}
