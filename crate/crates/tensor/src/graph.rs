use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::Array;
use crate::float::Float;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a graph. Parameters enter as constants.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Identity of a trainable array, unique within the process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// Maps an upstream gradient to gradients for each input.
///
/// Receives `(grad_out, inputs, output)`; returns one entry per input,
/// `None` where the input does not need a gradient.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Array<T>, &[Var<T>], &Array<T>) -> Vec<Option<Array<T>>>>;

struct GradFn<T> {
    inputs: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T> {
    value: Array<T>,
    grad_fn: Option<GradFn<T>>,
    param: Option<ParamId>,
}

/// A value in the computation graph.
pub struct Var<T>(Rc<Node<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl<T: Float> Var<T> {
    pub fn constant(value: Array<T>) -> Self {
        Var(Rc::new(Node {
            value,
            grad_fn: None,
            param: None,
        }))
    }

    pub(crate) fn from_op(value: Array<T>, inputs: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let grad_fn = if grad_enabled() && inputs.iter().any(Var::requires_grad) {
            Some(GradFn { inputs, backward })
        } else {
            None
        };
        Var(Rc::new(Node {
            value,
            grad_fn,
            param: None,
        }))
    }

    pub fn value(&self) -> &Array<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.param.is_some() || self.0.grad_fn.is_some()
    }

    /// Same value, cut from the graph: nothing upstream receives gradient through it.
    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from this (scalar) node.
    pub fn backward(&self) -> Grads<T> {
        let mut grads = Grads::default();
        if !self.requires_grad() {
            return grads;
        }

        // Post-order DFS; iterative to survive deep graphs.
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Var<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.key(), ());
        while let Some((node, child)) = stack.pop() {
            let inputs = node.0.grad_fn.as_ref().map(|g| &g.inputs[..]).unwrap_or(&[]);
            if child < inputs.len() {
                let next = inputs[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && seen.insert(next.key(), ()).is_none() {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        let mut pending: HashMap<usize, Array<T>> = HashMap::new();
        pending.insert(self.key(), Array::full(self.shape().to_vec(), T::one()));
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.key()) else {
                continue;
            };
            if let Some(id) = node.0.param {
                grads.accumulate(id, grad);
                continue;
            }
            let Some(gf) = node.0.grad_fn.as_ref() else {
                continue;
            };
            let input_grads = (gf.backward)(&grad, &gf.inputs, &node.0.value);
            debug_assert_eq!(input_grads.len(), gf.inputs.len());
            for (input, g) in gf.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.shape(), input.shape());
                match pending.get_mut(&input.key()) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        pending.insert(input.key(), g);
                    }
                }
            }
        }
        grads
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Default)]
pub struct Grads<T> {
    map: HashMap<ParamId, Array<T>>,
}

impl<T: Float> Grads<T> {
    fn accumulate(&mut self, id: ParamId, g: Array<T>) {
        match self.map.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(id, g);
            }
        }
    }

    pub fn get(&self, param: &Param<T>) -> Option<&Array<T>> {
        self.map.get(&param.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: Grads<T>) {
        for (id, g) in other.map {
            self.accumulate(id, g);
        }
    }
}

/// A trainable array.
#[derive(Clone, Debug)]
pub struct Param<T> {
    id: ParamId,
    value: Array<T>,
}

impl<T: Float> Param<T> {
    pub fn new(value: Array<T>) -> Self {
        Self {
            id: ParamId::fresh(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array<T> {
        &mut self.value
    }

    /// Graph leaf for this parameter; a constant under [`no_grad`].
    pub fn var(&self) -> Var<T> {
        if grad_enabled() {
            Var(Rc::new(Node {
                value: self.value.clone(),
                grad_fn: None,
                param: Some(self.id),
            }))
        } else {
            Var::constant(self.value.clone())
        }
    }
}
