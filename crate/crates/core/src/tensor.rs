//! Dense float64 tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation performed through it (define-by-run);
//! [`Tape::backward`] replays the record in reverse to produce gradients for
//! every reachable leaf. Tensors are immutable after construction and a tape
//! is confined to a single execution context.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::error::{ModelError, Result};

/// Handle into the tape's node list.
pub type NodeId = usize;

/// An immutable dense tensor. Row-major storage, shape `[]` means scalar.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: NodeId,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    /// Scalar value; panics if the tensor is not a single element.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "scalar() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(ModelError::shape(format!("expected matrix, got shape {s:?}"))),
        }
    }

    fn dims1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            s => Err(ModelError::shape(format!("expected vector, got shape {s:?}"))),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}, node={})", self.shape, self.node)
    }
}

/// Gradient of the output with respect to each parent, dense, same length as
/// the parent's value.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<NodeId>,
    len: usize,
    // None for leaves.
    backward: Option<BackwardFn>,
}

/// Operation record for one forward execution.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of a backward pass: per-node gradients, dense where reachable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, or `None` if `t` did not influence it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(t.node).and_then(|g| g.as_deref())
    }

    /// Gradient with unreachable tensors mapped to zeros.
    pub fn get_or_zero(&self, t: &Tensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numeric("non-finite value in forward op".into()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push_leaf(&self, len: usize) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents: Vec::new(), len, backward: None });
        nodes.len() - 1
    }

    fn push_op(&self, parents: Vec<NodeId>, len: usize, backward: BackwardFn) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, len, backward: Some(backward) });
        nodes.len() - 1
    }

    /// Register a leaf tensor.
    pub fn tensor(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(ModelError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        check_finite(&data)?;
        let node = self.push_leaf(data.len());
        Ok(Tensor { shape, data: Arc::new(data), node })
    }

    /// Leaf vector.
    pub fn vector(&self, data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        self.tensor(vec![n], data)
    }

    /// Leaf scalar.
    pub fn scalar(&self, v: f64) -> Result<Tensor> {
        self.tensor(vec![], vec![v])
    }

    fn finish(&self, shape: Vec<usize>, data: Vec<f64>, parents: Vec<NodeId>, backward: BackwardFn) -> Result<Tensor> {
        check_finite(&data)?;
        let node = self.push_op(parents, data.len(), backward);
        Ok(Tensor { shape, data: Arc::new(data), node })
    }

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (p, q) = a.dims2()?;
        let (q2, r) = b.dims2()?;
        if q != q2 {
            return Err(ModelError::shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}",
                a.shape, b.shape
            )));
        }
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for k in 0..q {
                let aik = a.data[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b.data[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for j in 0..r {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let (ad, bd) = (a.data.clone(), b.data.clone());
        self.finish(
            vec![p, r],
            out,
            vec![a.node, b.node],
            Box::new(move |g| {
                let mut da = vec![0.0; p * q];
                let mut db = vec![0.0; q * r];
                // dA = G B^T ; dB = A^T G
                for i in 0..p {
                    for j in 0..r {
                        let gij = g[i * r + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..q {
                            da[i * q + k] += gij * bd[k * r + j];
                            db[k * r + j] += ad[i * q + k] * gij;
                        }
                    }
                }
                vec![da, db]
            }),
        )
    }

    /// Matrix-vector product: `[p,q] x [q] -> [p]`.
    pub fn matvec(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (p, q) = a.dims2()?;
        let n = v.dims1()?;
        if q != n {
            return Err(ModelError::shape(format!(
                "matvec dimensions disagree: {:?} x {:?}",
                a.shape, v.shape
            )));
        }
        let mut out = vec![0.0; p];
        for i in 0..p {
            let row = &a.data[i * q..(i + 1) * q];
            out[i] = row.iter().zip(v.data.iter()).map(|(x, y)| x * y).sum();
        }
        let (ad, vd) = (a.data.clone(), v.data.clone());
        self.finish(
            vec![p],
            out,
            vec![a.node, v.node],
            Box::new(move |g| {
                let mut da = vec![0.0; p * q];
                let mut dv = vec![0.0; q];
                for i in 0..p {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for k in 0..q {
                        da[i * q + k] += gi * vd[k];
                        dv[k] += gi * ad[i * q + k];
                    }
                }
                vec![da, dv]
            }),
        )
    }

    fn binary_same_shape(
        &self,
        a: &Tensor,
        b: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&[f64], &Arc<Vec<f64>>, &Arc<Vec<f64>>) -> (Vec<f64>, Vec<f64>) + 'static,
    ) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(ModelError::shape(format!("{op}: shapes {:?} vs {:?}", a.shape, b.shape)));
        }
        let out: Vec<f64> = a.data.iter().zip(b.data.iter()).map(|(x, y)| f(*x, *y)).collect();
        let (ad, bd) = (a.data.clone(), b.data.clone());
        self.finish(
            a.shape.clone(),
            out,
            vec![a.node, b.node],
            Box::new(move |g| {
                let (da, db) = back(g, &ad, &bd);
                vec![da, db]
            }),
        )
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |g, _, _| (g.to_vec(), g.to_vec()))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |g, _, _| {
            (g.to_vec(), g.iter().map(|v| -v).collect())
        })
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |g, ad, bd| {
            (
                g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect(),
                g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect(),
            )
        })
    }

    fn unary(
        &self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let out: Vec<f64> = a.data.iter().map(|x| f(*x)).collect();
        let ad = a.data.clone();
        let od = Arc::new(out.clone());
        self.finish(
            a.shape.clone(),
            out,
            vec![a.node],
            Box::new(move |g| {
                vec![g
                    .iter()
                    .zip(ad.iter().zip(od.iter()))
                    .map(|(g, (x, y))| g * dfdx(*x, *y))
                    .collect()]
            }),
        )
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(a, |x| c * x, move |_, _| c)
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.scale(a, -1.0)
    }

    pub fn add_const(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(a, |x| x + c, |_, _| 1.0)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(
            a,
            |x| 1.0 / (1.0 + (-x).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.exp(), |_, y| y)
    }

    /// Natural log; domain error on non-positive input.
    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        if a.data.iter().any(|v| *v <= 0.0) {
            return Err(ModelError::Domain("log of non-positive value".into()));
        }
        self.unary(a, |x| x.ln(), |x, _| 1.0 / x)
    }

    /// `ln(max(x, floor))`; gradient is zero where the floor is active.
    pub fn log_floored(&self, a: &Tensor, floor: f64) -> Result<Tensor> {
        assert!(floor > 0.0);
        self.unary(
            a,
            move |x| x.max(floor).ln(),
            move |x, _| if x > floor { 1.0 / x } else { 0.0 },
        )
    }

    /// Integer power (elementwise).
    pub fn powi(&self, a: &Tensor, n: i32) -> Result<Tensor> {
        self.unary(a, move |x| x.powi(n), move |x, _| f64::from(n) * x.powi(n - 1))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.data.iter().sum();
        let len = a.len();
        self.finish(
            vec![],
            vec![s],
            vec![a.node],
            Box::new(move |g| vec![vec![g[0]; len]]),
        )
    }

    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let m = self.mul(a, b)?;
        self.sum(&m)
    }

    /// Row sums of a matrix: `[r,c] -> [r]`.
    pub fn row_sums(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        let out: Vec<f64> = (0..r).map(|i| a.data[i * c..(i + 1) * c].iter().sum()).collect();
        self.finish(
            vec![r],
            out,
            vec![a.node],
            Box::new(move |g| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[i];
                    }
                }
                vec![da]
            }),
        )
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&self, parts: &[&Tensor]) -> Result<Tensor> {
        let mut lens = Vec::with_capacity(parts.len());
        let mut out = Vec::new();
        let mut parents = Vec::with_capacity(parts.len());
        for p in parts {
            lens.push(p.dims1()?);
            out.extend_from_slice(&p.data);
            parents.push(p.node);
        }
        let total = out.len();
        self.finish(
            vec![total],
            out,
            parents,
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut off = 0;
                for len in &lens {
                    grads.push(g[off..off + len].to_vec());
                    off += len;
                }
                grads
            }),
        )
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let n = a.dims1()?;
        if start + len > n {
            return Err(ModelError::shape(format!("slice {start}..{} out of bounds for {n}", start + len)));
        }
        let out = a.data[start..start + len].to_vec();
        self.finish(
            vec![len],
            out,
            vec![a.node],
            Box::new(move |g| {
                let mut da = vec![0.0; n];
                da[start..start + len].copy_from_slice(g);
                vec![da]
            }),
        )
    }

    /// Single element of a 1-D tensor, as a scalar.
    pub fn element(&self, a: &Tensor, i: usize) -> Result<Tensor> {
        let n = a.dims1()?;
        if i >= n {
            return Err(ModelError::shape(format!("element {i} out of bounds for {n}")));
        }
        self.finish(
            vec![],
            vec![a.data[i]],
            vec![a.node],
            Box::new(move |g| {
                let mut da = vec![0.0; n];
                da[i] = g[0];
                vec![da]
            }),
        )
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, a: &Tensor, i: usize) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        if i >= r {
            return Err(ModelError::shape(format!("row {i} out of bounds for {r}")));
        }
        let out = a.data[i * c..(i + 1) * c].to_vec();
        self.finish(
            vec![c],
            out,
            vec![a.node],
            Box::new(move |g| {
                let mut da = vec![0.0; r * c];
                da[i * c..(i + 1) * c].copy_from_slice(g);
                vec![da]
            }),
        )
    }

    /// Select rows of a matrix by index (indices may repeat).
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(ModelError::shape(format!("gather_rows index {i} out of bounds for {r}")));
            }
            out.extend_from_slice(&a.data[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        self.finish(
            vec![idx.len(), c],
            out,
            vec![a.node],
            Box::new(move |g| {
                let mut da = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[k * c + j];
                    }
                }
                vec![da]
            }),
        )
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data[i * c + j];
            }
        }
        self.finish(
            vec![c, r],
            out,
            vec![a.node],
            Box::new(move |g| {
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                vec![da]
            }),
        )
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(ModelError::Contract("stack_rows of zero rows".into()));
        }
        let c = rows[0].dims1()?;
        let mut out = Vec::with_capacity(rows.len() * c);
        let mut parents = Vec::with_capacity(rows.len());
        for row in rows {
            if row.dims1()? != c {
                return Err(ModelError::shape("stack_rows: ragged rows"));
            }
            out.extend_from_slice(&row.data);
            parents.push(row.node);
        }
        let n = rows.len();
        self.finish(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| (0..n).map(|i| g[i * c..(i + 1) * c].to_vec()).collect()),
        )
    }

    /// Stack equal-length vectors as the columns of a matrix.
    pub fn stack_cols(&self, cols: &[Tensor]) -> Result<Tensor> {
        let stacked = self.stack_rows(cols)?;
        self.transpose(&stacked)
    }

    /// Broadcast a scalar into a vector of length `len`.
    pub fn broadcast(&self, s: &Tensor, len: usize) -> Result<Tensor> {
        if !s.shape.is_empty() {
            return Err(ModelError::shape(format!("broadcast expects scalar, got {:?}", s.shape)));
        }
        self.finish(
            vec![len],
            vec![s.data[0]; len],
            vec![s.node],
            Box::new(move |g| vec![vec![g.iter().sum()]]),
        )
    }

    /// Multiply a tensor by a scalar tensor.
    pub fn mul_scalar(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if !s.shape.is_empty() {
            return Err(ModelError::shape(format!("mul_scalar expects scalar, got {:?}", s.shape)));
        }
        let sv = s.data[0];
        let out: Vec<f64> = a.data.iter().map(|x| x * sv).collect();
        let ad = a.data.clone();
        self.finish(
            a.shape.clone(),
            out,
            vec![a.node, s.node],
            Box::new(move |g| {
                let da = g.iter().map(|g| g * sv).collect();
                let ds = g.iter().zip(ad.iter()).map(|(g, x)| g * x).sum();
                vec![da, vec![ds]]
            }),
        )
    }

    /// Reciprocal of a scalar.
    pub fn recip(&self, s: &Tensor) -> Result<Tensor> {
        if !s.shape.is_empty() {
            return Err(ModelError::shape(format!("recip expects scalar, got {:?}", s.shape)));
        }
        let x = s.data[0];
        if x == 0.0 {
            return Err(ModelError::Domain("recip of zero".into()));
        }
        self.finish(
            vec![],
            vec![1.0 / x],
            vec![s.node],
            Box::new(move |g| vec![vec![-g[0] / (x * x)]]),
        )
    }

    /// Elementwise `a / b` with the quotient defined as 0 where `b < eps`.
    pub fn guarded_div(&self, a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
        self.binary_same_shape(
            a,
            b,
            "guarded_div",
            move |x, y| if y < eps { 0.0 } else { x / y },
            move |g, ad, bd| {
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if bd[i] >= eps {
                        da[i] = g[i] / bd[i];
                        db[i] = -g[i] * ad[i] / (bd[i] * bd[i]);
                    }
                }
                (da, db)
            },
        )
    }

    /// Prefix sums of a vector.
    pub fn cumsum(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.dims1()?;
        let mut out = Vec::with_capacity(n);
        let mut acc = 0.0;
        for &x in a.data.iter() {
            acc += x;
            out.push(acc);
        }
        self.finish(
            vec![n],
            out,
            vec![a.node],
            Box::new(move |g| {
                // d cumsum_i / d x_j = 1 for j <= i, so grad is a reverse prefix sum.
                let mut da = vec![0.0; n];
                let mut acc = 0.0;
                for i in (0..n).rev() {
                    acc += g[i];
                    da[i] = acc;
                }
                vec![da]
            }),
        )
    }

    /// Outer product of two vectors: `[p] x [q] -> [p,q]`.
    pub fn outer(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let p = a.dims1()?;
        let q = b.dims1()?;
        let mut out = Vec::with_capacity(p * q);
        for i in 0..p {
            for j in 0..q {
                out.push(a.data[i] * b.data[j]);
            }
        }
        let (ad, bd) = (a.data.clone(), b.data.clone());
        self.finish(
            vec![p, q],
            out,
            vec![a.node, b.node],
            Box::new(move |g| {
                let mut da = vec![0.0; p];
                let mut db = vec![0.0; q];
                for i in 0..p {
                    for j in 0..q {
                        da[i] += g[i * q + j] * bd[j];
                        db[j] += g[i * q + j] * ad[i];
                    }
                }
                vec![da, db]
            }),
        )
    }

    /// Multiply every row of a matrix elementwise by a vector.
    pub fn mul_cols(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        if v.dims1()? != c {
            return Err(ModelError::shape(format!("mul_cols: {:?} vs {:?}", a.shape, v.shape)));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(a.data[i * c + j] * v.data[j]);
            }
        }
        let (ad, vd) = (a.data.clone(), v.data.clone());
        self.finish(
            vec![r, c],
            out,
            vec![a.node, v.node],
            Box::new(move |g| {
                let mut da = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[i * c + j] * vd[j];
                        dv[j] += g[i * c + j] * ad[i * c + j];
                    }
                }
                vec![da, dv]
            }),
        )
    }

    /// Add a vector to every row of a matrix.
    pub fn add_to_rows(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        if v.dims1()? != c {
            return Err(ModelError::shape(format!("add_to_rows: {:?} vs {:?}", a.shape, v.shape)));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(a.data[i * c + j] + v.data[j]);
            }
        }
        self.finish(
            vec![r, c],
            out,
            vec![a.node, v.node],
            Box::new(move |g| {
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += g[i * c + j];
                    }
                }
                vec![g.to_vec(), dv]
            }),
        )
    }

    /// `out[i,j] = a[i,j] + u[i] + v[j]`.
    pub fn add_outer(&self, a: &Tensor, u: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        if u.dims1()? != r || v.dims1()? != c {
            return Err(ModelError::shape(format!(
                "add_outer: {:?} + {:?} + {:?}",
                a.shape, u.shape, v.shape
            )));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(a.data[i * c + j] + u.data[i] + v.data[j]);
            }
        }
        self.finish(
            vec![r, c],
            out,
            vec![a.node, u.node, v.node],
            Box::new(move |g| {
                let mut du = vec![0.0; r];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        du[i] += g[i * c + j];
                        dv[j] += g[i * c + j];
                    }
                }
                vec![g.to_vec(), du, dv]
            }),
        )
    }

    /// Numerically stable softmax over a 1-D tensor.
    pub fn softmax_1d(&self, a: &Tensor) -> Result<Tensor> {
        let n = a.dims1()?;
        let out = softmax_slice(&a.data);
        let od = Arc::new(out.clone());
        self.finish(
            vec![n],
            out,
            vec![a.node],
            Box::new(move |g| vec![softmax_backward_slice(g, &od)]),
        )
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend_from_slice(&softmax_slice(&a.data[i * c..(i + 1) * c]));
        }
        let od = Arc::new(out.clone());
        self.finish(
            vec![r, c],
            out,
            vec![a.node],
            Box::new(move |g| {
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    da.extend_from_slice(&softmax_backward_slice(
                        &g[i * c..(i + 1) * c],
                        &od[i * c..(i + 1) * c],
                    ));
                }
                vec![da]
            }),
        )
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(ModelError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.node] = Some(vec![1.0]);
        for id in (0..=loss.node).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[*pid] {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(pg.iter()) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn softmax_backward_slice(g: &[f64], y: &[f64]) -> Vec<f64> {
    let inner: f64 = g.iter().zip(y.iter()).map(|(g, y)| g * y).sum();
    g.iter().zip(y.iter()).map(|(g, y)| y * (g - inner)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = tape.tensor(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let tape = Tape::new();
        let a = tape.tensor(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = tape.tensor(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let tape = Tape::new();
        let a = tape.tensor(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.tensor(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_sum_gradient_is_ones_times_b_transpose() {
        let tape = Tape::new();
        let a = tape.tensor(vec![2, 2], vec![0.3, -0.1, 0.7, 0.2]).unwrap();
        let b = tape.tensor(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum(&c).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let da = grads.get(&a).unwrap();
        // ones * B^T
        assert_eq!(da, &[3.0, 7.0, 3.0, 7.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let tape = Tape::new();
        let x = tape.vector(vec![0.0, 0.0]).unwrap();
        let y = tape.softmax_1d(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let x = tape.vector(vec![1000.0, 0.0]).unwrap();
        let y = tape.softmax_1d(&x).unwrap();
        assert!(y.data()[0] > 0.999 && y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.tensor(vec![2, 3], vec![0.1, -2.0, 3.0, 5.0, 5.0, 5.0]).unwrap();
        let y = tape.softmax_rows(&x).unwrap();
        for i in 0..2 {
            let s: f64 = y.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(y.data()[i * 3..(i + 1) * 3].iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.vector(vec![0.0]).unwrap();
        let y = tape.sigmoid(&x).unwrap();
        assert_eq!(y.data(), &[0.5]);
    }

    #[test]
    fn concat_vectors() {
        let tape = Tape::new();
        let a = tape.vector(vec![1.0]).unwrap();
        let b = tape.vector(vec![2.0, 3.0]).unwrap();
        let c = tape.concat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let x = tape.vector(vec![1.0, 0.0]).unwrap();
        assert!(tape.log(&x).is_err());
    }

    #[test]
    fn log_gradient_at_two() {
        let tape = Tape::new();
        let x = tape.vector(vec![2.0]).unwrap();
        let y = tape.log(&x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!((grads.get(&x).unwrap()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_of_leaf_is_ones() {
        let tape = Tape::new();
        let p = tape.vector(vec![0.2, -0.4, 1.1]).unwrap();
        let loss = tape.sum(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let p = tape.vector(vec![0.2, -0.4]).unwrap();
        assert!(tape.backward(&p).is_err());
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let tape = Tape::new();
        let used = tape.vector(vec![1.0, 2.0]).unwrap();
        let unused = tape.vector(vec![5.0]).unwrap();
        let loss = tape.sum(&used).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&unused).is_none());
        assert_eq!(grads.get_or_zero(&unused), vec![0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let a = tape.tensor(vec![3, 3], (0..9).map(|i| (i as f64) * 0.37 - 1.0).collect()).unwrap();
            let b = tape.softmax_rows(&a).unwrap();
            let c = tape.matmul(&b, &a).unwrap();
            let s = tape.sum(&c).unwrap();
            s.scalar()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn composed_chain_matches_finite_differences() {
        check_gradients(
            &[vec![2, 3], vec![3, 1]],
            |tape, inputs| {
                let h = tape.matmul(&inputs[0], &inputs[1])?;
                let s = tape.sigmoid(&h)?;
                tape.sum(&s)
            },
            1e-4,
            7,
        );
    }

    #[test]
    fn op_suite_matches_finite_differences() {
        // add / mul / concat / slice chain
        check_gradients(
            &[vec![4], vec![4]],
            |tape, xs| {
                let a = tape.add(&xs[0], &xs[1])?;
                let m = tape.mul(&a, &xs[0])?;
                let c = tape.concat(&[&m, &xs[1]])?;
                let s = tape.slice(&c, 1, 5)?;
                tape.sum(&s)
            },
            1e-4,
            11,
        );
        // softmax
        check_gradients(
            &[vec![5]],
            |tape, xs| {
                let y = tape.softmax_1d(&xs[0])?;
                let w = tape.vector(vec![0.9, -0.3, 0.1, 0.5, -1.2])?;
                tape.dot(&y, &w)
            },
            1e-4,
            13,
        );
        // exp / tanh / sigmoid
        check_gradients(
            &[vec![6]],
            |tape, xs| {
                let e = tape.exp(&xs[0])?;
                let t = tape.tanh(&e)?;
                let s = tape.sigmoid(&t)?;
                tape.sum(&s)
            },
            1e-4,
            17,
        );
        // cumsum / powi
        check_gradients(
            &[vec![5]],
            |tape, xs| {
                let sm = tape.softmax_1d(&xs[0])?;
                let c = tape.cumsum(&sm)?;
                let p = tape.powi(&c, 3)?;
                tape.sum(&p)
            },
            1e-4,
            19,
        );
        // outer / mul_cols / add_outer / row_sums / transpose
        check_gradients(
            &[vec![3], vec![4], vec![3, 4]],
            |tape, xs| {
                let o = tape.outer(&xs[0], &xs[1])?;
                let m = tape.mul_cols(&xs[2], &xs[1])?;
                let a = tape.add_outer(&m, &xs[0], &xs[1])?;
                let s = tape.add(&o, &a)?;
                let t = tape.transpose(&s)?;
                let r = tape.row_sums(&t)?;
                tape.sum(&r)
            },
            1e-4,
            23,
        );
        // guarded_div away from the guard
        check_gradients(
            &[vec![4]],
            |tape, xs| {
                let denom = tape.vector(vec![1.0, 2.0, 0.5, 3.0])?;
                let d = tape.guarded_div(&xs[0], &denom, 1e-12)?;
                tape.sum(&d)
            },
            1e-4,
            29,
        );
        // matvec / add_to_rows / gather_rows / broadcast / mul_scalar / recip
        check_gradients(
            &[vec![3, 4], vec![4]],
            |tape, xs| {
                let g = tape.gather_rows(&xs[0], &[0, 2, 1, 0])?;
                let a = tape.add_to_rows(&g, &xs[1])?;
                let v = tape.matvec(&a, &xs[1])?;
                let s = tape.sum(&v)?;
                let sq = tape.mul(&v, &v)?;
                let total = tape.sum(&sq)?;
                let denom = tape.add_const(&total, 2.0)?;
                let inv = tape.recip(&denom)?;
                let b = tape.broadcast(&inv, 3)?;
                let out = tape.mul_scalar(&b, &s)?;
                tape.sum(&out)
            },
            1e-4,
            31,
        );
    }
}
