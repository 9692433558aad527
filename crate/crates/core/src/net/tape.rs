//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes may only reference earlier nodes, so the recorded graph is acyclic
//! by construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Besides the usual dense primitives the tape has fused nodes for the
//! hyperbolic pieces of the model: the exponential map at the origin,
//! pairwise geodesic distances, cone half-apertures, exterior angles and a
//! row-wise InfoNCE reduction. Their vector-Jacobian products come from the
//! closed-form kernels in [`crate::manifold`] and [`crate::cones`].

use std::sync::atomic::{AtomicU32, Ordering};

use crate::cones::{exterior_angle_kernel, half_aperture_kernel};
use crate::error::{Error, Result};
use crate::manifold::{acosh1p, distance_kernel, expmap0_spatial, expmap0_vjp, inner_excess, PairGrad, COINCIDENT_FLOOR};
use crate::scalar::Real;

/// Dense row-major matrix. Scalars are `1×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::contract(format!(
                "tensor shape {rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &[T]) {
        for (a, &b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Square(Var),
    Tanh(Var),
    Exp(Var),
    Relu(Var),
    Clamp { x: Var, lo: T, hi: T },
    ExpMap0 { u: Var, kappa: Var },
    PairDist { a: Var, b: Var, kappa: Var },
    HalfAperture { q: Var, kappa: Var },
    ExteriorAngle { p: Var, q: Var, kappa: Var },
    InfoNce { logits: Var, exclude_positive: bool },
    Mean(Var),
    Sum(Var),
}

/// Per-node cache of Jacobian pieces computed during the forward pass.
#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    Aperture(Vec<Option<(Vec<T>, T)>>),
    Angle(Vec<Option<PairGrad<T>>>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// For non-smooth ops: which side of each kink every element sits on.
    kinks: Vec<bool>,
    cache: Cache<T>,
}

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Records a computation for reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(rows, cols))
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves created with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, Vec::new(), Cache::None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T, requires_grad: bool) -> Var {
        self.leaf(Tensor::scalar(value), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.index(v).expect("var from this tape")].value
    }

    pub fn item(&self, v: Var) -> T {
        self.value(v).item()
    }

    /// Concatenated kink flags of all non-smooth nodes. Two evaluations with
    /// equal signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> Vec<bool> {
        self.nodes.iter().flat_map(|n| n.kinks.iter().copied()).collect()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::contract("variable does not belong to this tape"));
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        Ok(&self.nodes[self.index(v)?])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, kinks: Vec<bool>, cache: Cache<T>) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            kinks,
            cache,
        });
        Var { tape: self.id, idx }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    fn scalar_of(&self, v: Var) -> Result<T> {
        let t = &self.node(v)?.value;
        if t.shape() != (1, 1) {
            return Err(Error::contract(format!("expected a scalar, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(Error::contract(format!("shape mismatch {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.map_with(x, &[x], op, f)
    }

    fn map_with(&mut self, x: Var, deps: &[Var], op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let t = &self.node(x)?.value;
        let data = t.data.iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.rows, t.cols, data)?;
        let rg = self.needs(deps);
        Ok(self.push(value, op, rg, Vec::new(), Cache::None))
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.cols != tb.rows {
            return Err(Error::contract(format!(
                "matmul shape mismatch {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ta.data[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&tb.data[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), rg, Vec::new(), Cache::None))
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(Error::contract(format!(
                "row broadcast shape mismatch {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data
            .chunks(ta.cols.max(1))
            .flat_map(|r| r.iter().zip(&tb.data).map(|(&x, &y)| x + y))
            .collect();
        let value = Tensor::new(ta.rows, ta.cols, data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), rg, Vec::new(), Cache::None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b)?;
        let data = self.nodes[a.idx]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.idx].value.data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(r, c, data)?, Op::Add(a, b), rg, Vec::new(), Cache::None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b)?;
        let data = self.nodes[a.idx]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.idx].value.data)
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(r, c, data)?, Op::Sub(a, b), rg, Vec::new(), Cache::None))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// Multiplies every element by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s)?;
        self.map_with(x, &[x, s], Op::MulScalar(x, s), |v| v * c)
    }

    /// Divides every element by the scalar node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_of(s)?;
        self.map_with(x, &[x, s], Op::DivScalar(x, s), |v| v / c)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), |v| v.exp())
    }

    /// `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, Op::Relu(x), |v| v.max(T::zero()))?;
        let kinks = self.nodes[x.idx].value.data.iter().map(|&v| v > T::zero()).collect();
        self.nodes[out.idx].kinks = kinks;
        Ok(out)
    }

    /// Clamps into `[lo, hi]`; elements where the clamp binds pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.map(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))?;
        let kinks = self.nodes[x.idx].value.data.iter().flat_map(|&v| [v < lo, v > hi]).collect();
        self.nodes[out.idx].kinks = kinks;
        Ok(out)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        if t.data.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let n = T::from_usize(t.data.len()).expect("length fits");
        let m = t.data.iter().copied().sum::<T>() / n;
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg, Vec::new(), Cache::None))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data.iter().copied().sum::<T>();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg, Vec::new(), Cache::None))
    }

    /// Row-wise `exp_0(u)` onto the hyperboloid with curvature from the scalar
    /// node `kappa`; returns spatial coordinates.
    pub fn expmap0(&mut self, u: Var, kappa: Var) -> Result<Var> {
        let k = self.scalar_of(kappa)?;
        let t = &self.nodes[u.idx].value;
        let mut data = Vec::with_capacity(t.data.len());
        for i in 0..t.rows {
            data.extend(expmap0_spatial(t.row(i), k));
        }
        let value = Tensor::new(t.rows, t.cols, data)?;
        let rg = self.needs(&[u, kappa]);
        Ok(self.push(value, Op::ExpMap0 { u, kappa }, rg, Vec::new(), Cache::None))
    }

    /// Matrix of geodesic distances between the rows of `a` (`m×n`) and of
    /// `b` (`k×n`), both given as spatial coordinates.
    pub fn pair_dist(&mut self, a: Var, b: Var, kappa: Var) -> Result<Var> {
        let k = self.scalar_of(kappa)?;
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.cols != tb.cols {
            return Err(Error::DimensionMismatch {
                expected: ta.cols,
                got: tb.cols,
            });
        }
        let mut data = Vec::with_capacity(ta.rows * tb.rows);
        let mut kinks = Vec::with_capacity(ta.rows * tb.rows);
        let sk = k.sqrt();
        for i in 0..ta.rows {
            for j in 0..tb.rows {
                let x = inner_excess(ta.row(i), tb.row(j), k);
                data.push(acosh1p(x) / sk);
                kinks.push(x * (x + T::lit(2.0)) < T::lit(COINCIDENT_FLOOR));
            }
        }
        let value = Tensor::new(ta.rows, tb.rows, data)?;
        let rg = self.needs(&[a, b, kappa]);
        Ok(self.push(value, Op::PairDist { a, b, kappa }, rg, kinks, Cache::None))
    }

    /// Row-wise cone half-aperture (`m×1`) of the points in `q`.
    pub fn half_aperture(&mut self, q: Var, kappa: Var, k: T) -> Result<Var> {
        let kap = self.scalar_of(kappa)?;
        let t = &self.node(q)?.value;
        let mut data = Vec::with_capacity(t.rows);
        let mut cache = Vec::with_capacity(t.rows);
        for i in 0..t.rows {
            let (w, g) = half_aperture_kernel(t.row(i), kap, k);
            data.push(w);
            cache.push(g);
        }
        let kinks = cache.iter().map(Option::is_none).collect();
        let value = Tensor::new(t.rows, 1, data)?;
        let rg = self.needs(&[q, kappa]);
        Ok(self.push(value, Op::HalfAperture { q, kappa }, rg, kinks, Cache::Aperture(cache)))
    }

    /// Row-wise exterior angle (`m×1`) of `p[i]` with respect to the cone at `q[i]`.
    pub fn exterior_angle(&mut self, p: Var, q: Var, kappa: Var) -> Result<Var> {
        let kap = self.scalar_of(kappa)?;
        let (rows, _) = self.same_shape(p, q)?;
        let (tp, tq) = (&self.nodes[p.idx].value, &self.nodes[q.idx].value);
        let mut data = Vec::with_capacity(rows);
        let mut cache = Vec::with_capacity(rows);
        for i in 0..rows {
            let (phi, g) = exterior_angle_kernel(tp.row(i), tq.row(i), kap);
            data.push(phi);
            cache.push(g);
        }
        let kinks = cache.iter().map(Option::is_none).collect();
        let value = Tensor::new(rows, 1, data)?;
        let rg = self.needs(&[p, q, kappa]);
        Ok(self.push(value, Op::ExteriorAngle { p, q, kappa }, rg, kinks, Cache::Angle(cache)))
    }

    /// Mean over rows of the cross-entropy with the diagonal as target:
    /// `−(l_ii − log Σ_k exp l_ik)`. With `exclude_positive` the sum in the
    /// denominator skips `k = i`.
    pub fn info_nce(&mut self, logits: Var, exclude_positive: bool) -> Result<Var> {
        let t = &self.node(logits)?.value;
        if t.rows != t.cols || t.rows < 2 {
            return Err(Error::contract(format!(
                "contrastive logits must be square with at least 2 rows, got {:?}",
                t.shape()
            )));
        }
        let b = t.rows;
        let mut total = T::zero();
        for i in 0..b {
            let row = t.row(i);
            total += lse_row(row, i, exclude_positive) - row[i];
        }
        let value = Tensor::scalar(total / T::from_usize(b).expect("batch fits"));
        let rg = self.needs(&[logits]);
        Ok(self.push(value, Op::InfoNce { logits, exclude_positive }, rg, Vec::new(), Cache::None))
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let r = self.index(root)?;
        if self.nodes[r].value.shape() != (1, 1) {
            return Err(Error::contract("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[r] = Some(Tensor::scalar(T::one()));
        for idx in (0..=r).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for input in inputs(&node.op) {
                if input.idx >= idx {
                    return Err(Error::contract("graph is not topologically ordered (cycle)"));
                }
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let mut acc = |v: Var, contrib: &[T]| {
            let target = &nodes[v.idx];
            if !target.requires_grad {
                return;
            }
            let (r, c) = target.value.shape();
            grads[v.idx].get_or_insert_with(|| Tensor::zeros(r, c)).add_assign(contrib);
        };
        let val = |v: Var| &nodes[v.idx].value;
        let scalar_grad = |contrib: T| [contrib];
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                if nodes[a.idx].requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    for i in 0..m {
                        let gi = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..(p + 1) * n];
                            ga[i * k + p] = gi.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    acc(a, &ga);
                }
                if nodes[b.idx].requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    for i in 0..m {
                        let gi = &g.data[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data[i * k + p];
                            if aip == T::zero() {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *o += aip * gv;
                            }
                        }
                    }
                    acc(b, &gb);
                }
            }
            Op::AddRow(a, b) => {
                acc(a, &g.data);
                let cols = g.cols;
                let mut gb = vec![T::zero(); cols];
                for row in g.data.chunks(cols.max(1)) {
                    for (o, &x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                acc(b, &gb);
            }
            Op::Add(a, b) => {
                acc(a, &g.data);
                acc(b, &g.data);
            }
            Op::Sub(a, b) => {
                acc(a, &g.data);
                let neg: Vec<T> = g.data.iter().map(|&x| -x).collect();
                acc(b, &neg);
            }
            Op::Scale(x, c) => {
                let d: Vec<T> = g.data.iter().map(|&v| v * c).collect();
                acc(x, &d);
            }
            Op::MulScalar(x, s) => {
                let c = val(s).item();
                let d: Vec<T> = g.data.iter().map(|&v| v * c).collect();
                acc(x, &d);
                let gs = g.data.iter().zip(&val(x).data).map(|(&a, &b)| a * b).sum();
                acc(s, &scalar_grad(gs));
            }
            Op::DivScalar(x, s) => {
                let c = val(s).item();
                let d: Vec<T> = g.data.iter().map(|&v| v / c).collect();
                acc(x, &d);
                let gs: T = g.data.iter().zip(&val(x).data).map(|(&a, &b)| a * b).sum();
                acc(s, &scalar_grad(-gs / (c * c)));
            }
            Op::Square(x) => {
                let d: Vec<T> = g.data.iter().zip(&val(x).data).map(|(&gv, &v)| gv * (v + v)).collect();
                acc(x, &d);
            }
            Op::Tanh(x) => {
                let d: Vec<T> = g
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                acc(x, &d);
            }
            Op::Exp(x) => {
                let d: Vec<T> = g.data.iter().zip(&node.value.data).map(|(&gv, &y)| gv * y).collect();
                acc(x, &d);
            }
            Op::Relu(x) => {
                let d: Vec<T> = g
                    .data
                    .iter()
                    .zip(&val(x).data)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(x, &d);
            }
            Op::Clamp { x, lo, hi } => {
                let d: Vec<T> = g
                    .data
                    .iter()
                    .zip(&val(x).data)
                    .map(|(&gv, &v)| if v < lo || v > hi { T::zero() } else { gv })
                    .collect();
                acc(x, &d);
            }
            Op::Mean(x) => {
                let t = val(x);
                let n = T::from_usize(t.data.len()).expect("length fits");
                acc(x, &vec![g.item() / n; t.data.len()]);
            }
            Op::Sum(x) => {
                acc(x, &vec![g.item(); val(x).data.len()]);
            }
            Op::ExpMap0 { u, kappa } => {
                let k = val(kappa).item();
                let t = val(u);
                let mut du = Vec::with_capacity(t.data.len());
                let mut dk = T::zero();
                for i in 0..t.rows {
                    let (gu, gk) = expmap0_vjp(t.row(i), k, g.row(i));
                    du.extend(gu);
                    dk += gk;
                }
                acc(u, &du);
                acc(kappa, &scalar_grad(dk));
            }
            Op::PairDist { a, b, kappa } => {
                let k = val(kappa).item();
                let (ta, tb) = (val(a), val(b));
                let n = ta.cols;
                let mut ga = vec![T::zero(); ta.data.len()];
                let mut gb = vec![T::zero(); tb.data.len()];
                let mut gk = T::zero();
                for i in 0..ta.rows {
                    for j in 0..tb.rows {
                        let up = g.get(i, j);
                        if up == T::zero() {
                            continue;
                        }
                        if let (_, Some(pg)) = distance_kernel(ta.row(i), tb.row(j), k) {
                            for (o, &d) in ga[i * n..(i + 1) * n].iter_mut().zip(&pg.dp) {
                                *o += up * d;
                            }
                            for (o, &d) in gb[j * n..(j + 1) * n].iter_mut().zip(&pg.dq) {
                                *o += up * d;
                            }
                            gk += up * pg.dkappa;
                        }
                    }
                }
                acc(a, &ga);
                acc(b, &gb);
                acc(kappa, &scalar_grad(gk));
            }
            Op::HalfAperture { q, kappa, .. } => {
                let Cache::Aperture(cache) = &node.cache else {
                    return Err(Error::contract("aperture node without cache"));
                };
                let n = val(q).cols;
                let mut gq = vec![T::zero(); val(q).data.len()];
                let mut gk = T::zero();
                for (i, c) in cache.iter().enumerate() {
                    if let Some((dq, dk)) = c {
                        let up = g.data[i];
                        for (o, &d) in gq[i * n..(i + 1) * n].iter_mut().zip(dq) {
                            *o += up * d;
                        }
                        gk += up * *dk;
                    }
                }
                acc(q, &gq);
                acc(kappa, &scalar_grad(gk));
            }
            Op::ExteriorAngle { p, q, kappa } => {
                let Cache::Angle(cache) = &node.cache else {
                    return Err(Error::contract("angle node without cache"));
                };
                let n = val(q).cols;
                let mut gp = vec![T::zero(); val(p).data.len()];
                let mut gq = vec![T::zero(); val(q).data.len()];
                let mut gk = T::zero();
                for (i, c) in cache.iter().enumerate() {
                    if let Some(pg) = c {
                        let up = g.data[i];
                        for (o, &d) in gp[i * n..(i + 1) * n].iter_mut().zip(&pg.dp) {
                            *o += up * d;
                        }
                        for (o, &d) in gq[i * n..(i + 1) * n].iter_mut().zip(&pg.dq) {
                            *o += up * d;
                        }
                        gk += up * pg.dkappa;
                    }
                }
                acc(p, &gp);
                acc(q, &gq);
                acc(kappa, &scalar_grad(gk));
            }
            Op::InfoNce { logits, exclude_positive } => {
                let t = val(logits);
                let b = t.rows;
                let scale = g.item() / T::from_usize(b).expect("batch fits");
                let mut d = vec![T::zero(); t.data.len()];
                for i in 0..b {
                    let row = t.row(i);
                    let lse = lse_row(row, i, exclude_positive);
                    for (j, &l) in row.iter().enumerate() {
                        let soft = if exclude_positive && j == i { T::zero() } else { (l - lse).exp() };
                        let target = if j == i { T::one() } else { T::zero() };
                        d[i * b + j] = scale * (soft - target);
                    }
                }
                acc(logits, &d);
            }
        }
        Ok(())
    }
}

/// Max-shifted log-sum-exp of a row, optionally skipping the diagonal entry.
fn lse_row<T: Real>(row: &[T], diag: usize, skip_diag: bool) -> T {
    let keep = |j: usize| !(skip_diag && j == diag);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    let s: T = row
        .iter()
        .enumerate()
        .filter(|(j, _)| keep(*j))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + s.ln()
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) => vec![a, b],
        Op::MulScalar(x, s) | Op::DivScalar(x, s) => vec![x, s],
        Op::Scale(x, _) | Op::Square(x) | Op::Tanh(x) | Op::Exp(x) | Op::Relu(x) | Op::Clamp { x, .. } | Op::Mean(x) | Op::Sum(x) => {
            vec![x]
        }
        Op::ExpMap0 { u, kappa } => vec![u, kappa],
        Op::PairDist { a, b, kappa } => vec![a, b, kappa],
        Op::HalfAperture { q, kappa, .. } => vec![q, kappa],
        Op::ExteriorAngle { p, q, kappa } => vec![p, q, kappa],
        Op::InfoNce { logits, .. } => vec![logits],
    }
}
