//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The graph is dynamic: every op allocates a fresh node holding the forward
//! result and a backward closure. Leaves created with [`Tensor::param`] receive
//! gradients after [`Tensor::backward`]; everything else is freed when the last
//! handle drops. All kernels run on a single thread in f64.

mod checkpoint;
mod optim;
mod rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use optim::Adam;
pub use rng::Rng;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to a node in the computation graph. Cloning is cheap (Rc).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Result node of an op: keeps the tape only if some parent needs gradients.
    fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Ok(Self::new_node(shape, data, true, parents, Some(backward)))
        } else {
            Ok(Self::new_node(shape, data, false, vec![], None))
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("extent product does not match data length {}", data.len()),
            });
        }
        check_finite("from_vec", &data)?;
        Ok(Self::new_node(shape, data, false, vec![], None))
    }

    /// Trainable leaf: participates in backward and receives a gradient buffer.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                op: "param",
                shape,
                reason: format!("extent product does not match data length {}", data.len()),
            });
        }
        check_finite("param", &data)?;
        Ok(Self::new_node(shape, data, true, vec![], None))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Self::new_node(shape, vec![0.0; n], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new_node(vec![1], vec![v], false, vec![], None)
    }

    /// Standard-normal samples drawn from `rng`.
    pub fn randn(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Self::new_node(shape, data, false, vec![], None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place update of a leaf's values (optimizer use only).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Copy of the values with no graph history.
    pub fn detach(&self) -> Tensor {
        Self::new_node(self.node.shape.clone(), self.data(), false, vec![], None)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf reachable from `self`.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.node.shape.clone()));
        }
        // iterative post-order DFS over the requires_grad subgraph
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((t, child)) = stack.pop() {
            if child == 0 {
                if !t.node.requires_grad || !visited.insert(t.node.id) {
                    continue;
                }
            }
            if child < t.node.parents.len() {
                let next = t.node.parents[child].clone();
                stack.push((t, child + 1));
                if next.node.requires_grad && !visited.contains(&next.node.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }
        *self.node.grad.borrow_mut() = Some(vec![1.0]);
        for t in order.iter().rev() {
            if let Some(bw) = &t.node.backward {
                let g = t.node.grad.borrow().clone();
                if let Some(g) = g {
                    bw(&g);
                }
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    fn zip_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.node.shape != other.node.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.node.shape.clone(),
                rhs: other.node.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "add")?;
        let a = self.node.data.borrow();
        let b = other.node.data.borrow();
        let data: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        drop(a);
        drop(b);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            "add",
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "sub")?;
        let a = self.node.data.borrow();
        let b = other.node.data.borrow();
        let data: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        drop(a);
        drop(b);
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            "sub",
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.accumulate_grad(&neg);
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "mul")?;
        let a = self.node.data.borrow().clone();
        let b = other.node.data.borrow().clone();
        let data: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        let (pa, pb) = (self.clone(), other.clone());
        let (sa, sb) = (a, b);
        Tensor::from_op(
            "mul",
            self.node.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().zip(sb.iter()).map(|(gi, y)| gi * y).collect();
                let gb: Vec<f64> = g.iter().zip(sa.iter()).map(|(gi, x)| gi * x).collect();
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.node.data.borrow().iter().map(|x| x * c).collect();
        let pa = self.clone();
        Tensor::from_op(
            "scale",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                pa.accumulate_grad(&ga);
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.node.data.borrow().iter().map(|x| x + c).collect();
        let pa = self.clone();
        Tensor::from_op(
            "add_scalar",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| pa.accumulate_grad(g)),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data: Vec<f64> = self.node.data.borrow().iter().map(|x| x.tanh()).collect();
        let pa = self.clone();
        let y = data.clone();
        Tensor::from_op(
            "tanh",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gi, yi)| gi * (1.0 - yi * yi))
                    .collect();
                pa.accumulate_grad(&ga);
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data: Vec<f64> = self
            .node
            .data
            .borrow()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let pa = self.clone();
        let y = data.clone();
        Tensor::from_op(
            "sigmoid",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gi, yi)| gi * yi * (1.0 - yi))
                    .collect();
                pa.accumulate_grad(&ga);
            }),
        )
    }

    pub fn relu(&self) -> Result<Tensor> {
        let x = self.node.data.borrow().clone();
        let data: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        let pa = self.clone();
        Tensor::from_op(
            "relu",
            self.node.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                pa.accumulate_grad(&ga);
            }),
        )
    }

    // ---- shape ----

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::InvalidShape {
                op,
                shape: other.to_vec(),
                reason: "expected a rank-2 tensor".into(),
            }),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("incompatible with {} elements", self.len()),
            });
        }
        let pa = self.clone();
        Tensor::from_op(
            "reshape",
            shape,
            self.data(),
            vec![self.clone()],
            Box::new(move |g| pa.accumulate_grad(g)),
        )
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose2")?;
        let x = self.node.data.borrow();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        drop(x);
        let pa = self.clone();
        Tensor::from_op(
            "transpose2",
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                // g has shape (c, r); transpose back
                let mut ga = vec![0.0; r * c];
                for j in 0..c {
                    for i in 0..r {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                pa.accumulate_grad(&ga);
            }),
        )
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_rows")?;
        if r0 > r1 || r1 > r {
            return Err(TensorError::Contract {
                op: "slice_rows",
                reason: format!("range {r0}..{r1} out of bounds for {r} rows"),
            });
        }
        let data = self.node.data.borrow()[r0 * c..r1 * c].to_vec();
        let pa = self.clone();
        Tensor::from_op(
            "slice_rows",
            vec![r1 - r0, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                ga[r0 * c..r1 * c].copy_from_slice(g);
                pa.accumulate_grad(&ga);
            }),
        )
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_cols")?;
        if c0 > c1 || c1 > c {
            return Err(TensorError::Contract {
                op: "slice_cols",
                reason: format!("range {c0}..{c1} out of bounds for {c} columns"),
            });
        }
        let x = self.node.data.borrow();
        let w = c1 - c0;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&x[i * c + c0..i * c + c1]);
        }
        drop(x);
        let pa = self.clone();
        Tensor::from_op(
            "slice_cols",
            vec![r, w],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    ga[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                pa.accumulate_grad(&ga);
            }),
        )
    }

    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat_rows",
                reason: "no tensors to concatenate".into(),
            });
        }
        let (_, c) = parts[0].dims2("concat_rows")?;
        let mut rows = 0usize;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(&p.node.data.borrow());
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let captured = owned.clone();
        Tensor::from_op(
            "concat_rows",
            vec![rows, c],
            data,
            owned,
            Box::new(move |g| {
                let mut off = 0usize;
                for (p, sz) in captured.iter().zip(sizes.iter()) {
                    p.accumulate_grad(&g[off..off + sz]);
                    off += sz;
                }
            }),
        )
    }

    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat_cols",
                reason: "no tensors to concatenate".into(),
            });
        }
        let (r, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let (pr, pc) = p.dims2("concat_cols")?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0usize;
        for (p, w) in parts.iter().zip(widths.iter()) {
            let pd = p.node.data.borrow();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let captured = owned.clone();
        Tensor::from_op(
            "concat_cols",
            vec![r, total],
            data,
            owned,
            Box::new(move |g| {
                let mut off = 0usize;
                for (p, w) in captured.iter().zip(widths.iter()) {
                    let mut gp = vec![0.0; r * w];
                    for i in 0..r {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    p.accumulate_grad(&gp);
                    off += w;
                }
            }),
        )
    }

    // ---- reductions / broadcast ----

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.node.data.borrow().iter().sum();
        let n = self.len();
        let pa = self.clone();
        Tensor::from_op(
            "sum_all",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                let ga = vec![g[0]; n];
                pa.accumulate_grad(&ga);
            }),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len();
        if n == 0 {
            return Err(TensorError::Contract {
                op: "mean_all",
                reason: "empty tensor".into(),
            });
        }
        let s: f64 = self.node.data.borrow().iter().sum::<f64>() / n as f64;
        let pa = self.clone();
        Tensor::from_op(
            "mean_all",
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                let ga = vec![g[0] / n as f64; n];
                pa.accumulate_grad(&ga);
            }),
        )
    }

    /// Row means of a rank-2 tensor: (r, c) -> (r, 1).
    pub fn row_mean(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("row_mean")?;
        let x = self.node.data.borrow();
        let data: Vec<f64> = (0..r)
            .map(|i| x[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        drop(x);
        let pa = self.clone();
        Tensor::from_op(
            "row_mean",
            vec![r, 1],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g[i] / c as f64;
                    for j in 0..c {
                        ga[i * c + j] = gi;
                    }
                }
                pa.accumulate_grad(&ga);
            }),
        )
    }

    /// Running mean along the column axis: y[i,t] = mean(x[i,0..=t]).
    /// Causal counterpart of a global average pool.
    pub fn cummean_cols(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("cummean_cols")?;
        let x = self.node.data.borrow();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let mut acc = 0.0;
            for t in 0..c {
                acc += x[i * c + t];
                data[i * c + t] = acc / (t + 1) as f64;
            }
        }
        drop(x);
        let pa = self.clone();
        Tensor::from_op(
            "cummean_cols",
            vec![r, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                // dx[i,tau] = sum_{t >= tau} g[i,t] / (t+1)
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let mut tail = 0.0;
                    for t in (0..c).rev() {
                        tail += g[i * c + t] / (t + 1) as f64;
                        ga[i * c + t] = tail;
                    }
                }
                pa.accumulate_grad(&ga);
            }),
        )
    }

    /// Adds a (r, 1) column vector to every column of a (r, c) tensor.
    pub fn add_col(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_col")?;
        if v.shape() != [r, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_col",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let x = self.node.data.borrow();
        let vv = v.node.data.borrow();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = x[i * c + j] + vv[i];
            }
        }
        drop(x);
        drop(vv);
        let (pa, pv) = (self.clone(), v.clone());
        Tensor::from_op(
            "add_col",
            vec![r, c],
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let gv: Vec<f64> = (0..r).map(|i| g[i * c..(i + 1) * c].iter().sum()).collect();
                pv.accumulate_grad(&gv);
            }),
        )
    }

    /// Multiplies every column of a (r, c) tensor by a (r, 1) column vector.
    pub fn mul_col(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("mul_col")?;
        if v.shape() != [r, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let x = self.node.data.borrow().clone();
        let vv = v.node.data.borrow().clone();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = x[i * c + j] * vv[i];
            }
        }
        let (pa, pv) = (self.clone(), v.clone());
        Tensor::from_op(
            "mul_col",
            vec![r, c],
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                let mut gv = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[i * c + j] * vv[i];
                        gv[i] += g[i * c + j] * x[i * c + j];
                    }
                }
                pa.accumulate_grad(&ga);
                pv.accumulate_grad(&gv);
            }),
        )
    }

    /// Adds a (1, c) row vector to every row of a (r, c) tensor.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("add_row")?;
        if v.shape() != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let x = self.node.data.borrow();
        let vv = v.node.data.borrow();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = x[i * c + j] + vv[j];
            }
        }
        drop(x);
        drop(vv);
        let (pa, pv) = (self.clone(), v.clone());
        Tensor::from_op(
            "add_row",
            vec![r, c],
            data,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                pa.accumulate_grad(g);
                let mut gv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gv[j] += g[i * c + j];
                    }
                }
                pv.accumulate_grad(&gv);
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let a = self.node.data.borrow().clone();
        let b = other.node.data.borrow().clone();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aik = a[i * k + p];
                if aik == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += aik * brow[j];
                }
            }
        }
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // dA = G B^T, dB = A^T G
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aik = a[i * k + p];
                        if aik == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] += aik * grow[j];
                        }
                    }
                }
                pa.accumulate_grad(&ga);
                pb.accumulate_grad(&gb);
            }),
        )
    }

    // ---- softmax family ----

    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("softmax_rows")?;
        let x = self.node.data.borrow();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                data[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                data[i * c + j] /= denom;
            }
        }
        drop(x);
        let pa = self.clone();
        let y = data.clone();
        Tensor::from_op(
            "softmax_rows",
            vec![r, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                pa.accumulate_grad(&ga);
            }),
        )
    }

    /// Row softmax restricted to positions where `mask` is 1; masked positions
    /// get exactly zero weight. Rows of the mask must not be all zero.
    pub fn masked_softmax_rows(&self, mask: &Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("masked_softmax_rows")?;
        self.zip_same_shape(mask, "masked_softmax_rows")?;
        let m = mask.node.data.borrow().clone();
        for v in &m {
            if *v != 0.0 && *v != 1.0 {
                return Err(TensorError::Contract {
                    op: "masked_softmax_rows",
                    reason: format!("mask entries must be 0 or 1, found {v}"),
                });
            }
        }
        let x = self.node.data.borrow();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mrow = &m[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if mrow[j] > 0.0 {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::Contract {
                    op: "masked_softmax_rows",
                    reason: format!("mask row {i} is all zero"),
                });
            }
            let mut denom = 0.0;
            for j in 0..c {
                if mrow[j] > 0.0 {
                    let e = (row[j] - mx).exp();
                    data[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                data[i * c + j] /= denom;
            }
        }
        drop(x);
        let pa = self.clone();
        let y = data.clone();
        Tensor::from_op(
            "masked_softmax_rows",
            vec![r, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                // masked entries have y = 0, so their gradient is exactly zero
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                pa.accumulate_grad(&ga);
            }),
        )
    }

    // ---- layer norm ----

    /// Per-row layer normalization with learned gain/bias of shape (1, c).
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (r, c) = self.dims2("layer_norm_rows")?;
        if gamma.shape() != [1, c] || beta.shape() != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let x = self.node.data.borrow().clone();
        let gm = gamma.node.data.borrow().clone();
        let bt = beta.node.data.borrow().clone();
        let mut data = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_sigma = vec![0.0; r];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_sigma[i] = inv;
            for j in 0..c {
                let h = (row[j] - mu) * inv;
                xhat[i * c + j] = h;
                data[i * c + j] = h * gm[j] + bt[j];
            }
        }
        let (pa, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Tensor::from_op(
            "layer_norm_rows",
            vec![r, c],
            data,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    let hr = &xhat[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mut ghat = vec![0.0; c];
                    for j in 0..c {
                        ghat[j] = gr[j] * gm[j];
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    let mean_ghat = ghat.iter().sum::<f64>() / c as f64;
                    let mean_ghat_h =
                        ghat.iter().zip(hr.iter()).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[i * c + j] =
                            inv_sigma[i] * (ghat[j] - mean_ghat - hr[j] * mean_ghat_h);
                    }
                }
                pa.accumulate_grad(&ga);
                pg.accumulate_grad(&gg);
                pb.accumulate_grad(&gb);
            }),
        )
    }

    // ---- convolution ----

    /// Causal dilated 1-D convolution. `self` is (c_in, t), `w` is
    /// (c_out, c_in, k), `b` is (c_out, 1). Output position `t` sees inputs at
    /// `t, t - d, ..., t - (k-1) d`; positions before the series start read as
    /// zero padding.
    pub fn conv1d_causal(&self, w: &Tensor, b: &Tensor, dilation: usize) -> Result<Tensor> {
        let (cin, t) = self.dims2("conv1d_causal")?;
        let (cout, wcin, k) = match w.shape() {
            [a, b2, c] => (*a, *b2, *c),
            other => {
                return Err(TensorError::InvalidShape {
                    op: "conv1d_causal",
                    shape: other.to_vec(),
                    reason: "weight must be rank 3 (c_out, c_in, k)".into(),
                })
            }
        };
        if wcin != cin || b.shape() != [cout, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_causal",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if dilation == 0 {
            return Err(TensorError::Contract {
                op: "conv1d_causal",
                reason: "dilation must be >= 1".into(),
            });
        }
        let x = self.node.data.borrow().clone();
        let wd = w.node.data.borrow().clone();
        let bd = b.node.data.borrow().clone();
        let mut data = vec![0.0; cout * t];
        for co in 0..cout {
            for pos in 0..t {
                let mut acc = bd[co];
                for ci in 0..cin {
                    for j in 0..k {
                        let off = j * dilation;
                        if pos >= off {
                            acc += wd[(co * cin + ci) * k + j] * x[ci * t + pos - off];
                        }
                    }
                }
                data[co * t + pos] = acc;
            }
        }
        let (pa, pw, pb) = (self.clone(), w.clone(), b.clone());
        Tensor::from_op(
            "conv1d_causal",
            vec![cout, t],
            data,
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; cin * t];
                let mut gw = vec![0.0; cout * cin * k];
                let mut gb = vec![0.0; cout];
                for co in 0..cout {
                    for pos in 0..t {
                        let go = g[co * t + pos];
                        if go == 0.0 {
                            continue;
                        }
                        gb[co] += go;
                        for ci in 0..cin {
                            for j in 0..k {
                                let off = j * dilation;
                                if pos >= off {
                                    gw[(co * cin + ci) * k + j] += go * x[ci * t + pos - off];
                                    ga[ci * t + pos - off] += go * wd[(co * cin + ci) * k + j];
                                }
                            }
                        }
                    }
                }
                pa.accumulate_grad(&ga);
                pw.accumulate_grad(&gw);
                pb.accumulate_grad(&gb);
            }),
        )
    }
}
