//! Wengert tape: ops append nodes in execution order, backward walks the list
//! in reverse exactly once. A tape belongs to one roll-out and is not shared
//! across threads; kernels inside a single op may still fan out internally.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub type NodeId = usize;

pub(crate) struct Sink<'a> {
    bufs: &'a mut [Option<Vec<f64>>],
    meta: &'a [NodeMeta],
}

impl<'a> Sink<'a> {
    /// Accumulate into a parent's gradient buffer. Parents that cannot reach
    /// a gradient leaf (constants, detached branches) are skipped, which is
    /// what makes a stop-gradient marker an exact zero.
    pub fn accum(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let m = &self.meta[id];
        if !m.requires {
            return;
        }
        let buf = self.bufs[id].get_or_insert_with(|| vec![0.0; m.len]);
        f(buf);
    }
}

type BackFn = Box<dyn Fn(&[f64], &mut Sink)>;

#[derive(Clone, Copy)]
struct NodeMeta {
    len: usize,
    requires: bool,
    is_leaf: bool,
}

struct TapeInner {
    meta: Vec<NodeMeta>,
    back: Vec<Option<BackFn>>,
}

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                meta: Vec::new(),
                back: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, meta: NodeMeta, back: Option<BackFn>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.meta.push(meta);
        inner.back.push(back);
        inner.meta.len() - 1
    }

    /// Leaf that accumulates a gradient (a parameter or checked input).
    pub fn var(&self, value: Tensor) -> Var {
        let id = self.push(
            NodeMeta { len: value.len(), requires: true, is_leaf: true },
            None,
        );
        Var { tape: self.clone(), id, value }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        let id = self.push(
            NodeMeta { len: value.len(), requires: false, is_leaf: true },
            None,
        );
        Var { tape: self.clone(), id, value }
    }

    pub(crate) fn record(&self, value: Tensor, parents_require: bool, back: BackFn) -> NodeId {
        if parents_require {
            self.push(
                NodeMeta { len: value.len(), requires: true, is_leaf: false },
                Some(back),
            )
        } else {
            // Dead branch for gradients: keep the node id stable, drop the closure.
            self.push(
                NodeMeta { len: value.len(), requires: false, is_leaf: false },
                None,
            )
        }
    }

    /// Reverse sweep from a scalar loss. Visits each recorded node once, in
    /// reverse recording order.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(TensorError::TapeMismatch);
        }
        if loss.value.len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss.value.shape()),
            ));
        }
        if !loss.value.is_finite() {
            return Err(TensorError::NonFinite("backward loss"));
        }
        let inner = self.inner.borrow();
        let n = inner.meta.len();
        let mut bufs: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        bufs.resize_with(n, || None);
        if inner.meta[loss.id].requires {
            bufs[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            if inner.meta[id].is_leaf {
                continue;
            }
            let Some(grad) = bufs[id].take() else { continue };
            if let Some(back) = &inner.back[id] {
                let mut sink = Sink { bufs: &mut bufs, meta: &inner.meta };
                back(&grad, &mut sink);
            }
        }
        Ok(Gradients { bufs })
    }
}

pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf var; zeros if the leaf never
    /// received any flow.
    pub fn wrt(&self, v: &Var) -> Tensor {
        match &self.bufs[v.id] {
            Some(buf) => Tensor::from_parts(v.value.shape().to_vec(), buf.clone()),
            None => Tensor::zeros(v.value.shape()),
        }
    }

    pub fn has(&self, v: &Var) -> bool {
        self.bufs[v.id].is_some()
    }
}

/// A tensor bound to a tape position.
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: NodeId,
    pub(crate) value: Tensor,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Stop-gradient marker: same value, no gradient flow through it.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value.clone())
    }

    pub(crate) fn same_tape(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    pub(crate) fn requires(&self) -> bool {
        self.tape.inner.borrow().meta[self.id].requires
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn detach_blocks_gradient_exactly() {
        let t = Tape::new();
        let a = t.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = ops::scale(&a.detach(), 3.0);
        let c = ops::add(&a, &b).unwrap();
        let loss = ops::sum_all(&c);
        let g = t.backward(&loss).unwrap();
        // Only the direct path contributes; the detached branch is exactly zero.
        assert_eq!(g.wrt(&a).values(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let a = t.var(Tensor::zeros(&[2]));
        assert!(t.backward(&a).is_err());
    }

    #[test]
    fn constants_do_not_allocate_gradients() {
        let t = Tape::new();
        let a = t.constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let b = ops::scale(&a, 2.0);
        let loss = ops::sum_all(&b);
        // The whole graph is constant, so backward is a no-op.
        let g = t.backward(&loss).unwrap();
        assert!(!g.has(&a));
        assert_eq!(g.wrt(&a).values(), &[0.0, 0.0]);
    }
}
