//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation whose inputs require gradients. Values are
//! reference counted so an inference-mode graph (nothing recorded) frees
//! intermediates as soon as the last [`Var`] handle drops.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::time::Instant;

use crate::error::{Error, Result};

use super::{Array, ParamId, ParamStore, Real};

pub type NodeId = usize;

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the root with respect to this node's output.
    pub grad: &'a Array<T>,
    pub inputs: &'a [Rc<Array<T>>],
    pub output: &'a Array<T>,
    /// Which inputs need a gradient; rules may skip the others.
    pub needs: &'a [bool],
}

/// Vector-Jacobian product of one recorded operation. Returns one entry per input.
pub trait Backward<T> {
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Array<T>>>>;
}

impl<T, F> Backward<T> for F
where
    F: Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Array<T>>>>,
{
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Array<T>>>> {
        self(ctx)
    }
}

/// Handle to a value in a graph. Constants carry no node id.
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<NodeId>,
    value: Rc<Array<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Array<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn tracked(&self) -> bool {
        self.id.is_some()
    }
}

struct Node<T> {
    tag: &'static str,
    inputs: Vec<Rc<Array<T>>>,
    parents: Vec<Option<NodeId>>,
    output: Rc<Array<T>>,
    backward: Option<Box<dyn Backward<T>>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: HashMap<ParamId, Var<T>>,
    param_nodes: Vec<(ParamId, NodeId)>,
    profile: Option<RefCell<Profile>>,
}

/// Wall time per op tag. Forward time is the interval since the previous recorded
/// op, so it also absorbs glue code between ops.
#[derive(Clone, Debug)]
struct Profile {
    last: Instant,
    by_tag: BTreeMap<&'static str, OpTime>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpTime {
    pub calls: usize,
    pub forward_s: f64,
    pub backward_s: f64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records operations for [`Graph::backward`].
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, params: HashMap::new(), param_nodes: Vec::new(), profile: None }
    }

    /// Starts collecting per-op wall times, reported by [`Graph::op_times`].
    pub fn profiled(mut self) -> Self {
        self.profile = Some(RefCell::new(Profile { last: Instant::now(), by_tag: BTreeMap::new() }));
        self
    }

    /// Per-tag timings, slowest (forward + backward) first. Empty unless [`profiled`](Self::profiled).
    pub fn op_times(&self) -> Vec<(&'static str, OpTime)> {
        let Some(p) = &self.profile else { return Vec::new() };
        let mut v: Vec<_> = p.borrow().by_tag.iter().map(|(k, t)| (*k, *t)).collect();
        v.sort_by(|a, b| (b.1.forward_s + b.1.backward_s).total_cmp(&(a.1.forward_s + a.1.backward_s)));
        v
    }

    /// A graph that records nothing; every result is a constant.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&self, value: Array<T>) -> Var<T> {
        Var { id: None, value: Rc::new(value) }
    }

    /// A tracked leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Array<T>) -> Var<T> {
        if !self.grad_enabled {
            return self.constant(value);
        }
        let output = Rc::new(value);
        let id = self.nodes.len();
        self.nodes.push(Node { tag: "leaf", inputs: vec![], parents: vec![], output: output.clone(), backward: None });
        Var { id: Some(id), value: output }
    }

    /// Binds a parameter. Repeated binds of the same slot (including through tied
    /// sites) return the same node, so gradients accumulate in one buffer.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        if let Some(v) = self.params.get(&id) {
            return v.clone();
        }
        let p = store.get(id);
        let v = if p.trainable { self.leaf(p.value.clone()) } else { self.constant(p.value.clone()) };
        if let Some(n) = v.id {
            self.param_nodes.push((id, n));
        }
        self.params.insert(id, v.clone());
        v
    }

    /// Records `value = op(inputs)`. `backward` is only kept when some input is tracked.
    pub fn record<B>(&mut self, tag: &'static str, value: Array<T>, inputs: &[&Var<T>], backward: B) -> Result<Var<T>>
    where
        B: Backward<T> + 'static,
    {
        if let Some(p) = &self.profile {
            let mut p = p.borrow_mut();
            let now = Instant::now();
            let dt = now.duration_since(p.last).as_secs_f64();
            p.last = now;
            let e = p.by_tag.entry(tag).or_default();
            e.calls += 1;
            e.forward_s += dt;
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: tag });
        }
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Ok(self.constant(value));
        }
        let output = Rc::new(value);
        let id = self.nodes.len();
        self.nodes.push(Node {
            tag,
            inputs: inputs.iter().map(|v| v.value.clone()).collect(),
            parents: inputs.iter().map(|v| v.id).collect(),
            output: output.clone(),
            backward: Some(Box::new(backward)),
        });
        Ok(Var { id: Some(id), value: output })
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        if root.value.len() != 1 {
            return Err(Error::NonScalarRoot(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(root_id) = root.id else {
            return Ok(Gradients { grads, param_nodes: self.param_nodes.clone() });
        };
        grads[root_id] = Some(Array::full(root.shape(), T::one()));
        for i in (0..=root_id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(rule) = &node.backward else {
                grads[i] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.is_some()).collect();
            let ctx = BackwardCtx { grad: &g, inputs: &node.inputs, output: &node.output, needs: &needs };
            let started = self.profile.as_ref().map(|_| Instant::now());
            let input_grads = rule.backward(&ctx)?;
            if let (Some(p), Some(t0)) = (&self.profile, started) {
                p.borrow_mut().by_tag.entry(node.tag).or_default().backward_s += t0.elapsed().as_secs_f64();
            }
            for (slot, (parent, ig)) in node.parents.iter().zip(input_grads).enumerate() {
                let (Some(p), Some(ig)) = (parent, ig) else { continue };
                if ig.shape() != node.inputs[slot].shape() {
                    return Err(Error::Shape {
                        op: node.tag,
                        detail: format!("gradient {:?} for input {:?}", ig.shape(), node.inputs[slot].shape()),
                    });
                }
                if !ig.all_finite() {
                    return Err(Error::NonFiniteGrad { op: node.tag });
                }
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads, param_nodes: self.param_nodes.clone() })
    }
}

/// Gradients of one backward sweep. Only leaves (inputs and parameters) are kept.
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: &Var<T>) -> Option<&Array<T>> {
        v.id.and_then(|i| self.grads.get(i)).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array<T>> {
        self.param_nodes.iter().find(|(p, _)| *p == id).and_then(|(_, n)| self.grads[*n].as_ref())
    }

    /// Parameter gradients keyed by slot.
    pub fn into_params(mut self) -> HashMap<ParamId, Array<T>> {
        let mut out = HashMap::new();
        for (p, n) in &self.param_nodes {
            if let Some(g) = self.grads[*n].take() {
                out.insert(*p, g);
            }
        }
        out
    }

    /// Parameter gradients keyed by canonical name.
    pub fn by_name(&self, store: &ParamStore<T>) -> std::collections::BTreeMap<String, Array<T>> {
        self.param_nodes
            .iter()
            .filter_map(|(p, n)| self.grads[*n].as_ref().map(|g| (store.get(*p).name.clone(), g.clone())))
            .collect()
    }
}
