//! Dense 64-bit tensors recording a reverse-mode computation graph.
//!
//! Every differentiable operation attaches a vector-Jacobian-product rule
//! that is itself expressed in these same primitives, so gradients returned
//! by [`backward`](super::backward) can be differentiated again.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug, PartialOrd, Ord)]
pub struct TensorId(pub(crate) u64);

/// Maps (upstream cotangent, node parents) to one cotangent per parent.
pub(crate) type VjpFn = Rc<dyn Fn(&Tensor, &[Tensor]) -> Vec<Tensor>>;

pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) vjp: Option<VjpFn>,
}

#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                requires_grad,
                parents: Vec::new(),
                vjp: None,
            }),
        }
    }

    pub(crate) fn op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        vjp: VjpFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            // Nothing upstream to differentiate; keep the result a plain leaf.
            return Tensor::leaf(shape, values, false);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values,
                requires_grad: true,
                parents,
                vjp: Some(vjp),
            }),
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::InvalidShape {
                op: "from_values",
                msg: format!("shape {:?} holds {} values, got {}", shape, numel(shape), values.len()),
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), values, false))
    }

    /// Trainable leaf: participates in gradient computation.
    pub fn parameter(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::InvalidShape {
                op: "parameter",
                msg: format!("shape {:?} holds {} values, got {}", shape, numel(shape), values.len()),
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), values, true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel(shape)], false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![1.0; numel(shape)], false)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![v; numel(shape)], false)
    }

    pub fn id(&self) -> TensorId {
        TensorId(self.inner.id)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn len(&self) -> usize {
        self.inner.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value; panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.values[0]
    }

    /// Same values, severed from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.inner.values.clone(), false)
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Rc::new(|g, _| vec![g.clone(), g.clone()]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "sub")?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Rc::new(|g, _| vec![g.clone(), g.neg()]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "mul")?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Rc::new(|g, p| {
                vec![
                    g.mul(&p[1]).expect("mul vjp"),
                    g.mul(&p[0]).expect("mul vjp"),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "div")?;
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a / b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone(), other.clone()],
            Rc::new(|g, p| {
                let da = g.div(&p[1]).expect("div vjp");
                let bb = p[1].mul(&p[1]).expect("div vjp");
                let db = g.mul(&p[0]).expect("div vjp").div(&bb).expect("div vjp").neg();
                vec![da, db]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        let values = self.values().iter().map(|a| -a).collect();
        Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Rc::new(|g, _| vec![g.neg()]),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|a| a * c).collect();
        Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Rc::new(move |g, _| vec![g.scale(c)]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let values = self.values().iter().map(|a| a + c).collect();
        Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Rc::new(|g, _| vec![g.clone()]),
        )
    }

    pub fn exp(&self) -> Tensor {
        let values = self.values().iter().map(|a| a.exp()).collect();
        Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Rc::new(|g, p| vec![g.mul(&p[0].exp()).expect("exp vjp")]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let values = self.values().iter().map(|a| a.ln()).collect();
        Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Rc::new(|g, p| vec![g.div(&p[0]).expect("ln vjp")]),
        )
    }

    /// Elementwise max(0, x); subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor {
        let values = self.values().iter().map(|a| a.max(0.0)).collect();
        Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Rc::new(|g, p| {
                let mask: Vec<f64> = p[0]
                    .values()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let mask = Tensor::leaf(p[0].shape().to_vec(), mask, false);
                vec![g.mul(&mask).expect("relu vjp")]
            }),
        )
    }

    /// Elementwise |x|; subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        let values = self.values().iter().map(|a| a.abs()).collect();
        Tensor::op(
            self.shape().to_vec(),
            values,
            vec![self.clone()],
            Rc::new(|g, p| {
                let sign: Vec<f64> = p[0]
                    .values()
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let sign = Tensor::leaf(p[0].shape().to_vec(), sign, false);
                vec![g.mul(&sign).expect("abs vjp")]
            }),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.values().iter().sum();
        let shape = self.shape().to_vec();
        Tensor::op(
            vec![],
            vec![total],
            vec![self.clone()],
            Rc::new(move |g, _| vec![g.broadcast_scalar(&shape)]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        assert!(n > 0, "mean of empty tensor");
        self.sum().scale(1.0 / n as f64)
    }

    /// Replicate a scalar to every element of `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.len(), 1, "broadcast_scalar source must be scalar");
        let v = self.inner.values[0];
        Tensor::op(
            shape.to_vec(),
            vec![v; numel(shape)],
            vec![self.clone()],
            Rc::new(|g, _| vec![g.sum()]),
        )
    }

    /// Row-major matrix product of [m,k] by [k,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                expected: a_shape.to_vec(),
                got: b_shape.to_vec(),
            });
        }
        let (m, k, n) = (a_shape[0], a_shape[1], b_shape[1]);
        let a = self.values();
        let b = other.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Tensor::op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Rc::new(|g, p| {
                let da = g.matmul(&p[1].transpose2()).expect("matmul vjp");
                let db = p[0].transpose2().matmul(g).expect("matmul vjp");
                vec![da, db]
            }),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "transpose2 needs rank 2");
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let v = self.values();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        Tensor::op(
            vec![n, m],
            out,
            vec![self.clone()],
            Rc::new(|g, _| vec![g.transpose2()]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            });
        }
        let orig = self.shape().to_vec();
        Ok(Tensor::op(
            shape.to_vec(),
            self.values().to_vec(),
            vec![self.clone()],
            Rc::new(move |g, _| vec![g.reshape(&orig).expect("reshape vjp")]),
        ))
    }

    /// out[i] = self[idx[i]] over flat indices. Linear; vjp is scatter_add.
    pub fn gather(&self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Tensor {
        debug_assert_eq!(idx.len(), numel(out_shape));
        let v = self.values();
        let out: Vec<f64> = idx.iter().map(|&i| v[i]).collect();
        let in_shape = self.shape().to_vec();
        let idx2 = Rc::clone(&idx);
        Tensor::op(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            Rc::new(move |g, _| vec![g.scatter_add(Rc::clone(&idx2), &in_shape)]),
        )
    }

    /// out[idx[i]] += self[i] into a zero tensor of `out_shape`. Vjp is gather.
    pub fn scatter_add(&self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Tensor {
        debug_assert_eq!(idx.len(), self.len());
        let mut out = vec![0.0; numel(out_shape)];
        for (&i, &v) in idx.iter().zip(self.values()) {
            out[i] += v;
        }
        let my_shape = self.shape().to_vec();
        let idx2 = Rc::clone(&idx);
        Tensor::op(
            out_shape.to_vec(),
            out,
            vec![self.clone()],
            Rc::new(move |g, _| vec![g.gather(Rc::clone(&idx2), &my_shape)]),
        )
    }
}
