use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read access to recorded values while running a backward rule.
pub(crate) struct Values<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T> Values<'_, T> {
    pub(crate) fn get(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }
}

/// Local derivative of one recorded operation.
///
/// `backward` receives the gradient of the loss w.r.t. the op output and
/// returns one entry per input (in the order the inputs were recorded);
/// entries for inputs with `need[i] == false` may be `None`.
pub(crate) trait Backward<T: Element> {
    fn backward(
        &self,
        values: &Values<'_, T>,
        inputs: &[Var],
        output: &Tensor<T>,
        grad_out: &[T],
        need: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    needs_grad: bool,
    op: &'static str,
}

/// Tape of executed operations in topological (creation) order.
///
/// Every operation appends exactly one node; `backward` walks the tape in
/// reverse, so each node is visited once and gradients flowing into a shared
/// input are summed in a fixed order.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables the NaN/Inf scan run after every recorded operation.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            inputs: Vec::new(),
            rule: None,
            needs_grad,
            op: "leaf",
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.input(t.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient accumulated in a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if self.check_finite {
            if let Some(index) = value.first_non_finite() {
                return Err(Error::NonFinite { op, index });
            }
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            rule: needs_grad.then_some(rule),
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode accumulation of d`loss`/d`leaf` into every leaf that
    /// requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(rule) = &node.rule else {
                if node.inputs.is_empty() && node.needs_grad {
                    leaf_grads.push((i, g));
                }
                continue;
            };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].needs_grad)
                .collect();
            let values = Values { nodes: &self.nodes };
            let contribs = rule.backward(&values, &node.inputs, &node.value, &g, &need);
            debug_assert_eq!(contribs.len(), node.inputs.len(), "{}", node.op);
            for ((inp, c), needed) in node.inputs.iter().zip(contribs).zip(&need) {
                let (Some(c), true) = (c, *needed) else { continue };
                debug_assert_eq!(c.len(), self.nodes[inp.0].value.numel(), "{}", node.op);
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(c),
                }
            }
        }

        for (i, g) in leaf_grads {
            if self.check_finite {
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "backward",
                        index,
                    });
                }
            }
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }
}
