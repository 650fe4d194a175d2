//! Reverse-mode tape.
//!
//! A tape owns the record of every operation applied through it. Tensors
//! hold no back-pointers, only a `(tape serial, node index)` tag, so
//! detached tensors and parameters move freely between threads and tapes.
//! `backward` consumes the tape's records; a second call is an error rather
//! than a silently stale result.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{self, OpSpec};
use super::{NodeId, Scalar, Tensor};
use crate::{Error, Result};

static TAPE_SERIAL: AtomicU64 = AtomicU64::new(1);

pub(super) struct Record<T: Scalar> {
    op: OpSpec,
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
}

pub struct Tape<T: Scalar = f32> {
    serial: u64,
    /// Shapes per node, used to size zero gradients for unused leaves.
    node_lens: Vec<usize>,
    records: Vec<Record<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            serial: TAPE_SERIAL.fetch_add(1, Ordering::Relaxed),
            node_lens: Vec::new(),
            records: Vec::new(),
            consumed: false,
        }
    }

    /// Register a tensor as a differentiable leaf on this tape. The returned
    /// tensor shares the input's storage.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Tensor<T> {
        let node = self.fresh_node(t.len());
        t.clone().with_node(node)
    }

    fn fresh_node(&mut self, len: usize) -> NodeId {
        let index = u32::try_from(self.node_lens.len()).expect("tape node count overflows u32");
        self.node_lens.push(len);
        NodeId { tape: self.serial, index }
    }

    pub fn num_records(&self) -> usize {
        self.records.len()
    }

    /// Apply `op`, validating inputs, checking the result for NaN/Inf, and
    /// recording the step when any input is attached to this tape.
    pub fn apply(&mut self, op: &OpSpec, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        let mut attached = false;
        for t in inputs {
            if let Some(node) = t.node() {
                if node.tape != self.serial {
                    return Err(Error::Tape(format!(
                        "{}: input belongs to a different tape ({} vs {})",
                        op.name(),
                        node.tape,
                        self.serial
                    )));
                }
                attached = true;
            }
        }
        let (shape, data) = ops::forward(op, inputs)?;
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::NonFinite { op: op.name() });
            }
        }
        let mut out = Tensor::new(shape, data)?;
        if attached {
            let node = self.fresh_node(out.len());
            out = out.with_node(node);
            self.records.push(Record {
                op: op.clone(),
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: out.clone(),
            });
        }
        Ok(out)
    }

    /// Run reverse accumulation from a scalar `loss` back to every attached
    /// node. Consumes the records; the tape can no longer apply ops.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<GradMap<T>> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        self.consumed = true;
        if loss.len() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = match loss.node() {
            Some(node) if node.tape == self.serial => node,
            Some(_) => return Err(Error::Tape("loss belongs to a different tape".into())),
            None => return Err(Error::Tape("loss is not attached to the tape".into())),
        };
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.node_lens.len()];
        grads[root.index as usize] = Some(vec![T::ONE]);

        for rec in self.records.iter().rev() {
            let out_node = rec.output.node().expect("recorded output is attached");
            let Some(gout) = grads[out_node.index as usize].take() else {
                continue; // output does not influence the loss
            };
            let needs: Vec<bool> = rec.inputs.iter().map(|t| t.node().is_some()).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let gin = ops::vjp(&rec.op, &rec.inputs, &rec.output, &gout, &needs)?;
            for (inp, g) in rec.inputs.iter().zip(gin) {
                let (Some(node), Some(g)) = (inp.node(), g) else { continue };
                debug_assert_eq!(g.len(), inp.len(), "{}: gradient length mismatch", rec.op.name());
                match &mut grads[node.index as usize] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        self.records.clear();
        let node_lens = std::mem::take(&mut self.node_lens);
        Ok(GradMap { tape: self.serial, node_lens, grads })
    }
}

/// Gradients by node, produced by [`Tape::backward`]. Leaves that do not
/// influence the loss report zeros of the right length.
pub struct GradMap<T: Scalar> {
    tape: u64,
    node_lens: Vec<usize>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> GradMap<T> {
    /// Gradient for a tensor attached to the originating tape.
    pub fn get(&self, t: &Tensor<T>) -> Result<Vec<T>> {
        let node = t
            .node()
            .ok_or_else(|| Error::Tape("tensor is not attached to any tape".into()))?;
        if node.tape != self.tape {
            return Err(Error::Tape("tensor belongs to a different tape".into()));
        }
        let idx = node.index as usize;
        Ok(match &self.grads[idx] {
            Some(g) => g.clone(),
            None => vec![T::ZERO; self.node_lens[idx]],
        })
    }

    /// Like `get` but avoids the copy when the gradient exists.
    pub fn take(&mut self, t: &Tensor<T>) -> Result<Vec<T>> {
        let node = t
            .node()
            .ok_or_else(|| Error::Tape("tensor is not attached to any tape".into()))?;
        if node.tape != self.tape {
            return Err(Error::Tape("tensor belongs to a different tape".into()));
        }
        let idx = node.index as usize;
        Ok(match self.grads[idx].take() {
            Some(g) => g,
            None => vec![T::ZERO; self.node_lens[idx]],
        })
    }
}

/// Collect named parameter gradients while checking each lookup.
pub fn collect_grads<T: Scalar>(
    grads: &mut GradMap<T>,
    named: &[(&str, &Tensor<T>)],
) -> Result<HashMap<String, Vec<T>>> {
    let mut out = HashMap::with_capacity(named.len());
    for (name, t) in named {
        out.insert((*name).to_string(), grads.take(t)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fanout_gradients_accumulate_exactly() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.add(&x, &x).unwrap();
        let loss = tape.sum(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn unused_leaf_reports_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let unused = tape.leaf(&Tensor::new([3], vec![0.0; 3]).unwrap());
        let loss = tape.sum(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&unused).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new([1], vec![1.0]).unwrap());
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err());
        // And so is applying new ops afterwards.
        assert!(tape.relu(&x).is_err());
    }

    #[test]
    fn cross_tape_inputs_are_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let xa = a.leaf(&Tensor::new([1], vec![1.0]).unwrap());
        let err = b.relu(&xa).unwrap_err().to_string();
        assert!(err.contains("different tape"), "{err}");
    }

    #[test]
    fn backward_needs_attached_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap());
        // Vector output is not a valid loss.
        let y = tape.relu(&x).unwrap();
        assert!(tape.backward(&y).is_err());

        let mut tape2 = Tape::<f32>::new();
        let _x2 = tape2.leaf(&Tensor::new([1], vec![1.0]).unwrap());
        let detached = Tensor::new([], vec![1.0f32]).unwrap();
        assert!(tape2.backward(&detached).is_err());
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let mut tape = Tape::<f32>::new();
        let a = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2], vec![3.0, 4.0]).unwrap();
        let c = tape.add(&a, &b).unwrap();
        assert!(c.node().is_none());
        assert_eq!(tape.num_records(), 0);
        assert_eq!(c.data(), &[4.0, 6.0]);
    }

    #[test]
    fn chain_through_mixed_ops_matches_hand_derivative() {
        // loss = sum(relu(x) * x) = sum over positive x of x^2
        // d/dx = 2x for x > 0, 0 for x < 0.
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new([3], vec![2.0, -1.0, 0.5]).unwrap());
        let r = tape.relu(&x).unwrap();
        let p = tape.mul(&r, &x).unwrap();
        let loss = tape.sum(&p).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), vec![4.0, 0.0, 1.0]);
    }
}
