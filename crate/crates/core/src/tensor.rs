//! Dense arrays and a small reverse-mode tape.
//!
//! Tape values are vectors; matrices only appear as parameters consumed by
//! `matvec`, `affine`, `rows_affine` and `embed`. Gradients of parameters
//! are accumulated densely into [`Gradients`].

use std::fmt::{self, Debug};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use thiserror::Error;

pub trait Scalar:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Debug + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

#[derive(Clone, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Array<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)
    }
}

impl<T: Scalar> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 3 || n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "array",
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Array::new(shape.to_vec(), vec![v; shape.iter().product()]).expect("valid shape")
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(lo..hi))).collect();
        Array::new(shape.to_vec(), data).expect("valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0].max(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::of(v.as_f64())).collect() }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter arrays in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    arrays: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), arrays: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, array: Array<T>) -> ParamId {
        assert!(self.id(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.arrays.push(array);
        ParamId(self.arrays.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId, TensorError> {
        self.id(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.arrays[id.0]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), arrays: self.arrays.iter().map(Array::cast).collect() }
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients { arrays: self.arrays.iter().map(|a| Array::zeros(a.shape())).collect() }
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }
}

/// Dense gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    arrays: Vec<Array<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.arrays[id.0]
    }

    pub fn arrays(&self) -> &[Array<T>] {
        &self.arrays
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.arrays {
            for x in &mut a.data {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.arrays.iter().map(Array::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.iter().all(|a| a.data.iter().all(|v| v.is_finite()))
    }
}

/// Scales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`. Returns `g`.
pub fn clip_by_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let g = grads.global_norm();
    if g > max_norm {
        grads.scale(T::of(max_norm / g));
    }
    g
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
    let lr = T::of(lr);
    for (p, g) in params.arrays.iter_mut().zip(&grads.arrays) {
        for (x, &d) in p.data.iter_mut().zip(&g.data) {
            *x -= lr * d;
        }
    }
}

pub fn decay_lr(lr: f64, factor: f64) -> f64 {
    lr * factor
}

/// Inverted-dropout mask: 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask<T: Scalar, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatVec { w: ParamId, x: Var },
    Affine { w: ParamId, b: ParamId, x: Var },
    RowsAffine { w: ParamId, b: ParamId, x: Var, rows: Vec<u32> },
    Embed { w: ParamId, row: u32 },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Log(Var),
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    NegLogPick { a: Var, index: usize },
    Pick { a: Var, index: usize },
    Dot(Var, Var),
    Dots { w: Var, items: Vec<Var> },
    WeightedSum { weights: Var, items: Vec<Var> },
    Mix { lam: Var, a: Var, b: Var },
    Scatter { alpha: Var, ids: Vec<u32> },
    Sum(Var),
}

struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
}

/// One recorded forward computation over borrowed parameters.
///
/// Operations panic on shape mismatches, which are programming errors.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn shape_check(op: &'static str, expected: usize, found: usize) {
    if expected != found {
        panic!(
            "{}",
            TensorError::ShapeMismatch { op, expected: vec![expected], found: vec![found] }
        );
    }
}

fn matvec_into<T: Scalar>(w: &Array<T>, x: &[T], out: &mut [T]) {
    let c = w.cols();
    for (o, row) in out.iter_mut().zip(w.data.chunks_exact(c)) {
        let mut s = T::zero();
        for (&a, &b) in row.iter().zip(x) {
            s += a * b;
        }
        *o += s;
    }
}

fn softmax_into<T: Scalar>(x: &[T], out: &mut Vec<T>) {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    out.clear();
    out.extend(x.iter().map(|&v| (v - m).exp()));
    let s: T = out.iter().copied().sum();
    for v in out.iter_mut() {
        *v = *v / s;
    }
}

pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    softmax_into(x, &mut out);
    out
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, p: ParamId) -> Var {
        let value = self.params.get(p).data.clone();
        self.push(value, Op::Param(p))
    }

    pub fn matvec(&mut self, w: ParamId, x: Var) -> Var {
        let wa = self.params.get(w);
        shape_check("matvec", wa.cols(), self.dim(x));
        let mut out = vec![T::zero(); wa.rows()];
        matvec_into(wa, self.value(x), &mut out);
        self.push(out, Op::MatVec { w, x })
    }

    /// `W·x + b`.
    pub fn affine(&mut self, w: ParamId, b: ParamId, x: Var) -> Var {
        let (wa, ba) = (self.params.get(w), self.params.get(b));
        shape_check("affine", wa.cols(), self.dim(x));
        shape_check("affine bias", wa.rows(), ba.len());
        let mut out = ba.data.clone();
        matvec_into(wa, self.value(x), &mut out);
        self.push(out, Op::Affine { w, b, x })
    }

    /// `W[r]·x + b[r]` for each listed row `r`.
    pub fn rows_affine(&mut self, w: ParamId, b: ParamId, x: Var, rows: Vec<u32>) -> Var {
        let (wa, ba) = (self.params.get(w), self.params.get(b));
        shape_check("rows_affine", wa.cols(), self.dim(x));
        let xv = self.value(x);
        let out = rows
            .iter()
            .map(|&r| {
                let row = wa.row(r as usize);
                row.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>() + ba.data[r as usize]
            })
            .collect();
        self.push(out, Op::RowsAffine { w, b, x, rows })
    }

    pub fn embed(&mut self, w: ParamId, row: u32) -> Var {
        let value = self.params.get(w).row(row as usize).to_vec();
        self.push(value, Op::Embed { w, row })
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Vec<T> {
        shape_check(op, self.dim(a), self.dim(b));
        self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "add", |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "mul", |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).iter().map(|&x| x * s).collect();
        self.push(v, Op::Scale(a, s))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::with_capacity(parts.iter().map(|&p| self.dim(p)).sum());
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.dim(a), "slice out of range");
        let v = self.value(a)[start..start + len].to_vec();
        self.push(v, Op::Slice { a, start })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(v, Op::Log(a))
    }

    /// Multiplies by a precomputed inverted-dropout mask.
    pub fn dropout(&mut self, a: Var, mask: Vec<T>) -> Var {
        shape_check("dropout", self.dim(a), mask.len());
        let v = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.push(v, Op::Dropout { a, mask })
    }

    /// `−log softmax(logits)[target]` as a one-element node.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.value(logits);
        assert!(target < lv.len(), "target out of range");
        let m = lv.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = lv.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        let loss = lse - lv[target];
        let probs = lv.iter().map(|&v| (v - lse).exp()).collect();
        self.push(vec![loss], Op::CrossEntropy { logits, target, probs })
    }

    /// `−log a[index]` for a probability vector.
    pub fn neg_log_pick(&mut self, a: Var, index: usize) -> Var {
        let v = -self.value(a)[index].ln();
        self.push(vec![v], Op::NegLogPick { a, index })
    }

    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let v = self.value(a)[index];
        self.push(vec![v], Op::Pick { a, index })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, "dot", |x, y| x * y).into_iter().sum();
        self.push(vec![v], Op::Dot(a, b))
    }

    /// `[w·items[0], w·items[1], …]`.
    pub fn dots(&mut self, w: Var, items: &[Var]) -> Var {
        let v = items
            .iter()
            .map(|&it| {
                shape_check("dots", self.dim(w), self.dim(it));
                self.value(w).iter().zip(self.value(it)).map(|(&a, &b)| a * b).sum()
            })
            .collect();
        self.push(v, Op::Dots { w, items: items.to_vec() })
    }

    /// `Σ_j weights[j]·items[j]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Var {
        shape_check("weighted_sum", items.len(), self.dim(weights));
        let d = self.dim(items[0]);
        let mut v = vec![T::zero(); d];
        for (j, &it) in items.iter().enumerate() {
            shape_check("weighted_sum", d, self.dim(it));
            let wj = self.value(weights)[j];
            for (o, &x) in v.iter_mut().zip(self.value(it)) {
                *o += wj * x;
            }
        }
        self.push(v, Op::WeightedSum { weights, items: items.to_vec() })
    }

    /// `lam[0]·a + lam[1]·b`.
    pub fn mix(&mut self, lam: Var, a: Var, b: Var) -> Var {
        shape_check("mix", 2, self.dim(lam));
        let (l0, l1) = (self.value(lam)[0], self.value(lam)[1]);
        let v = self.zip_with(a, b, "mix", |x, y| l0 * x + l1 * y);
        self.push(v, Op::Mix { lam, a, b })
    }

    /// A `size`-vector filled with `−c` where `alpha[j]` is added at
    /// `ids[j]`; duplicate ids sum their weights.
    pub fn scatter(&mut self, alpha: Var, ids: &[u32], size: usize, c: T) -> Var {
        shape_check("scatter", ids.len(), self.dim(alpha));
        let mut v = vec![-c; size];
        for (j, &id) in ids.iter().enumerate() {
            let slot = &mut v[id as usize];
            if !ids[..j].contains(&id) {
                *slot = T::zero();
            }
            *slot += self.value(alpha)[j];
        }
        self.push(v, Op::Scatter { alpha, ids: ids.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().copied().sum();
        self.push(vec![v], Op::Sum(a))
    }

    /// Back-propagates from `seeds` (node, d loss / d node), adding
    /// parameter gradients into `grads`.
    pub fn backward(&self, seeds: &[(Var, T)], grads: &mut Gradients<T>) {
        let n = self.nodes.len();
        let mut g: Vec<Option<Vec<T>>> = vec![None; n];
        for &(v, w) in seeds {
            let buf = g[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            for x in buf.iter_mut() {
                *x += w;
            }
        }
        for i in (0..n).rev() {
            let Some(gy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    for (d, &v) in grads.get_mut(*p).data.iter_mut().zip(&gy) {
                        *d += v;
                    }
                }
                Op::MatVec { w, x } | Op::Affine { w, x, .. } => {
                    let wa = self.params.get(*w);
                    let xv = &self.nodes[x.0].value;
                    let c = wa.cols();
                    {
                        let gw = grads.get_mut(*w);
                        for (r, &gr) in gy.iter().enumerate() {
                            if gr == T::zero() {
                                continue;
                            }
                            for (d, &xv) in gw.data[r * c..(r + 1) * c].iter_mut().zip(xv) {
                                *d += gr * xv;
                            }
                        }
                    }
                    if let Op::Affine { b, .. } = &node.op {
                        for (d, &v) in grads.get_mut(*b).data.iter_mut().zip(&gy) {
                            *d += v;
                        }
                    }
                    let gx = slot(&mut g, &self.nodes, *x);
                    for (r, &gr) in gy.iter().enumerate() {
                        if gr == T::zero() {
                            continue;
                        }
                        for (d, &wv) in gx.iter_mut().zip(wa.row(r)) {
                            *d += gr * wv;
                        }
                    }
                }
                Op::RowsAffine { w, b, x, rows } => {
                    let wa = self.params.get(*w);
                    let xv = &self.nodes[x.0].value;
                    for (&r, &gr) in rows.iter().zip(&gy) {
                        let gw = grads.get_mut(*w);
                        for (d, &xv) in gw.row_mut(r as usize).iter_mut().zip(xv) {
                            *d += gr * xv;
                        }
                        grads.get_mut(*b).data[r as usize] += gr;
                    }
                    let gx = slot(&mut g, &self.nodes, *x);
                    for (&r, &gr) in rows.iter().zip(&gy) {
                        for (d, &wv) in gx.iter_mut().zip(wa.row(r as usize)) {
                            *d += gr * wv;
                        }
                    }
                }
                Op::Embed { w, row } => {
                    for (d, &v) in grads.get_mut(*w).row_mut(*row as usize).iter_mut().zip(&gy) {
                        *d += v;
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut g, &self.nodes, *a), &gy);
                    add_into(slot(&mut g, &self.nodes, *b), &gy);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = slot(&mut g, &self.nodes, *a);
                    for ((d, &gv), &o) in ga.iter_mut().zip(&gy).zip(bv) {
                        *d += gv * o;
                    }
                    let gb = slot(&mut g, &self.nodes, *b);
                    for ((d, &gv), &o) in gb.iter_mut().zip(&gy).zip(av) {
                        *d += gv * o;
                    }
                }
                Op::Scale(a, s) => {
                    for (d, &gv) in slot(&mut g, &self.nodes, *a).iter_mut().zip(&gy) {
                        *d += gv * *s;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        add_into(slot(&mut g, &self.nodes, p), &gy[off..off + len]);
                        off += len;
                    }
                }
                Op::Slice { a, start } => {
                    let ga = slot(&mut g, &self.nodes, *a);
                    add_into(&mut ga[*start..*start + gy.len()], &gy);
                }
                Op::Tanh(a) => {
                    for ((d, &gv), &t) in slot(&mut g, &self.nodes, *a).iter_mut().zip(&gy).zip(y) {
                        *d += gv * (T::one() - t * t);
                    }
                }
                Op::Sigmoid(a) => {
                    for ((d, &gv), &s) in slot(&mut g, &self.nodes, *a).iter_mut().zip(&gy).zip(y) {
                        *d += gv * s * (T::one() - s);
                    }
                }
                Op::Softmax(a) => {
                    let dot: T = gy.iter().zip(y).map(|(&gv, &p)| gv * p).sum();
                    for ((d, &gv), &p) in slot(&mut g, &self.nodes, *a).iter_mut().zip(&gy).zip(y) {
                        *d += p * (gv - dot);
                    }
                }
                Op::Log(a) => {
                    let av = &self.nodes[a.0].value;
                    for ((d, &gv), &x) in slot(&mut g, &self.nodes, *a).iter_mut().zip(&gy).zip(av) {
                        *d += gv / x;
                    }
                }
                Op::Dropout { a, mask } => {
                    for ((d, &gv), &m) in slot(&mut g, &self.nodes, *a).iter_mut().zip(&gy).zip(mask) {
                        *d += gv * m;
                    }
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let gl = slot(&mut g, &self.nodes, *logits);
                    for (d, &p) in gl.iter_mut().zip(probs) {
                        *d += gy[0] * p;
                    }
                    gl[*target] -= gy[0];
                }
                Op::NegLogPick { a, index } => {
                    let p = self.nodes[a.0].value[*index];
                    slot(&mut g, &self.nodes, *a)[*index] -= gy[0] / p;
                }
                Op::Pick { a, index } => {
                    slot(&mut g, &self.nodes, *a)[*index] += gy[0];
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    for (d, &o) in slot(&mut g, &self.nodes, *a).iter_mut().zip(bv) {
                        *d += gy[0] * o;
                    }
                    for (d, &o) in slot(&mut g, &self.nodes, *b).iter_mut().zip(av) {
                        *d += gy[0] * o;
                    }
                }
                Op::Dots { w, items } => {
                    let wv = &self.nodes[w.0].value;
                    for (&it, &gj) in items.iter().zip(&gy) {
                        let iv = &self.nodes[it.0].value;
                        for (d, &o) in slot(&mut g, &self.nodes, *w).iter_mut().zip(iv) {
                            *d += gj * o;
                        }
                        for (d, &o) in slot(&mut g, &self.nodes, it).iter_mut().zip(wv) {
                            *d += gj * o;
                        }
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wv = &self.nodes[weights.0].value;
                    for (j, &it) in items.iter().enumerate() {
                        let iv = &self.nodes[it.0].value;
                        let gw: T = gy.iter().zip(iv).map(|(&a, &b)| a * b).sum();
                        slot(&mut g, &self.nodes, *weights)[j] += gw;
                        for (d, &gv) in slot(&mut g, &self.nodes, it).iter_mut().zip(&gy) {
                            *d += gv * wv[j];
                        }
                    }
                }
                Op::Mix { lam, a, b } => {
                    let lv = &self.nodes[lam.0].value;
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let g0: T = gy.iter().zip(av).map(|(&x, &y)| x * y).sum();
                    let g1: T = gy.iter().zip(bv).map(|(&x, &y)| x * y).sum();
                    let gl = slot(&mut g, &self.nodes, *lam);
                    gl[0] += g0;
                    gl[1] += g1;
                    for (d, &gv) in slot(&mut g, &self.nodes, *a).iter_mut().zip(&gy) {
                        *d += gv * lv[0];
                    }
                    for (d, &gv) in slot(&mut g, &self.nodes, *b).iter_mut().zip(&gy) {
                        *d += gv * lv[1];
                    }
                }
                Op::Scatter { alpha, ids } => {
                    let ga = slot(&mut g, &self.nodes, *alpha);
                    for (d, &id) in ga.iter_mut().zip(ids) {
                        *d += gy[id as usize];
                    }
                }
                Op::Sum(a) => {
                    for d in slot(&mut g, &self.nodes, *a).iter_mut() {
                        *d += gy[0];
                    }
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(g: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    g[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Log-uniform (Zipfian) proposal over ids sorted by descending frequency:
/// `p(i) = log((i+2)/(i+1)) / log(n+1)`.
#[derive(Debug, Clone, Copy)]
pub struct LogUniform {
    n: usize,
    log_range: f64,
}

/// Candidate set for one sampled-softmax step. The target comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub ids: Vec<u32>,
    /// `log Q(id)` with `Q` the expected count of `id` over all draws.
    pub log_q: Vec<f64>,
}

impl LogUniform {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "empty range");
        LogUniform { n, log_range: ((n + 1) as f64).ln() }
    }

    pub fn prob(&self, i: u32) -> f64 {
        ((i as f64 + 2.0) / (i as f64 + 1.0)).ln() / self.log_range
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.gen();
        let i = ((u * self.log_range).exp() - 1.0).floor() as usize;
        i.min(self.n - 1) as u32
    }

    /// The target plus `size − 1` distinct negatives, drawn with rejection
    /// of repeats and of the target.
    pub fn candidates<R: Rng>(&self, target: u32, size: usize, rng: &mut R) -> Candidates {
        assert!(size >= 1 && size <= self.n, "sample size must be in 1..=|V|");
        let mut ids = vec![target];
        let mut seen = std::collections::HashSet::from([target]);
        let mut tries = 0u64;
        while ids.len() < size {
            let s = self.sample(rng);
            tries += 1;
            if seen.insert(s) {
                ids.push(s);
            }
        }
        let tries = tries.max(1) as f64;
        let log_q = ids
            .iter()
            .map(|&i| {
                let p = self.prob(i);
                (-((-p).ln_1p() * tries).exp_m1()).ln()
            })
            .collect();
        Candidates { ids, log_q }
    }
}

impl<T: Scalar> Tape<'_, T> {
    /// Cross-entropy over the candidate logits corrected by `−log Q`.
    pub fn sampled_softmax_loss(&mut self, w: ParamId, b: ParamId, h: Var, cands: &Candidates) -> Var {
        let logits = self.rows_affine(w, b, h, cands.ids.clone());
        let corr = self.constant(cands.log_q.iter().map(|&q| T::of(-q)).collect());
        let z = self.add(logits, corr);
        self.cross_entropy(z, 0)
    }
}

/// Floor on the denominator of the relative error, so that gradients that
/// are zero up to rounding do not dominate the comparison.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Per parameter: (name, max relative error, max absolute error).
    pub params: Vec<(String, f64, f64)>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

/// Compares the analytic gradients returned by `loss_and_grad` with central
/// differences `(f(p+ε) − f(p−ε)) / 2ε`, element by element.
pub fn finite_difference_check<F>(params: &ParamStore<f64>, eps: f64, loss_and_grad: F) -> GradCheck
where
    F: Fn(&ParamStore<f64>) -> (f64, Gradients<f64>),
{
    let (_, analytic) = loss_and_grad(params);
    let mut work = params.clone();
    let mut out = Vec::new();
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let (mut rel, mut abs) = (0.0f64, 0.0f64);
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data[k];
            work.get_mut(id).data[k] = orig + eps;
            let fp = loss_and_grad(&work).0;
            work.get_mut(id).data[k] = orig - eps;
            let fm = loss_and_grad(&work).0;
            work.get_mut(id).data[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.get(id).data[k];
            let err = (a - numeric).abs();
            abs = abs.max(err);
            rel = rel.max(err / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR));
        }
        out.push((params.names[pi].clone(), rel, abs));
    }
    GradCheck { params: out }
}
