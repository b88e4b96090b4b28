use std::collections::{BTreeMap, HashMap};

use crate::tensor::{Graph, NodeId, Tensor};

/// A named parameter tensor.
///
/// Frozen parameters are bound as constants and never receive gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: true,
        }
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_values(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name.clone(), p.value.clone());
        });
        out
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            if !p.frozen {
                out.push(p.name.clone());
            }
        });
        out
    }

    fn frozen_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |p| {
            if p.frozen {
                out.push(p.name.clone());
            }
        });
        out
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.visit_mut(&mut |p| p.frozen = frozen);
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for item in self {
            item.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for item in self {
            item.visit_mut(f);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        if let Some(item) = self {
            item.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(item) = self {
            item.visit_mut(f);
        }
    }
}

/// 64-bit FNV digest over parameter names, shapes and value bits.
pub fn param_digest(model: &impl Parameterized, prefix: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for (name, value) in model.param_values() {
        if !name.starts_with(prefix) {
            continue;
        }
        eat(name.as_bytes());
        for d in value.shape() {
            eat(&d.to_le_bytes());
        }
        for v in value.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Forward-pass context: a tape plus the binding of parameters to leaves.
///
/// In training mode only non-frozen parameters whose names start with one of
/// the trainable prefixes become gradient leaves; everything else is bound as
/// a constant.
pub struct Ctx {
    pub graph: Graph,
    bound: HashMap<String, NodeId>,
    trainable: Option<Vec<String>>,
}

impl Ctx {
    pub fn inference() -> Self {
        Self {
            graph: Graph::new(),
            bound: HashMap::new(),
            trainable: None,
        }
    }

    /// Training context; an empty prefix list trains every unfrozen parameter.
    pub fn training(prefixes: &[&str]) -> Self {
        let mut list: Vec<String> = prefixes.iter().map(|s| s.to_string()).collect();
        if list.is_empty() {
            list.push(String::new());
        }
        Self {
            graph: Graph::new(),
            bound: HashMap::new(),
            trainable: Some(list),
        }
    }

    /// Inference context continuing an existing tape.
    pub fn from_graph(graph: Graph) -> Self {
        Self {
            graph,
            bound: HashMap::new(),
            trainable: None,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    fn is_trainable(&self, p: &Param) -> bool {
        !p.frozen
            && self
                .trainable
                .as_ref()
                .is_some_and(|list| list.iter().any(|pre| p.name.starts_with(pre.as_str())))
    }

    pub fn param(&mut self, p: &Param) -> NodeId {
        if let Some(&id) = self.bound.get(&p.name) {
            return id;
        }
        let rg = self.is_trainable(p);
        let id = self.graph.leaf(p.value.clone(), rg);
        self.bound.insert(p.name.clone(), id);
        id
    }

    /// Binds parameter `name` to an existing node, e.g. a probe point.
    pub fn bind(&mut self, name: &str, id: NodeId) {
        self.bound.insert(name.to_string(), id);
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.graph.constant(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.graph.value(id)
    }

    pub fn grad_of(&self, name: &str) -> Option<&Tensor> {
        self.bound.get(name).and_then(|&id| self.graph.grad(id))
    }

    pub fn bound_node(&self, name: &str) -> Option<NodeId> {
        self.bound.get(name).copied()
    }
}
