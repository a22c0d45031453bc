//! Configuration stage: transformations, bindings, variables and finalization.
//!
//! A [`Graph`] is mutable until [`Graph::finalize`] consumes it. Finalization
//! checks that the bindings form a DAG with every input bound, propagates
//! shapes in topological order and allocates every output buffer on its
//! placement. The returned [`ExecutableGraph`] has a fixed structure; only
//! variables and taint flags change afterwards.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::executor::{ExecNode, ExecutableGraph, RecoveryPolicy};
use crate::memory::{ArenaConfig, DeviceKind, DeviceSpec, KernelFn, Memory, MemoryError, Shape};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn from_index(index: usize) -> Self {
        NodeId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn input(self, index: usize) -> PortRef {
        PortRef {
            node: self,
            direction: PortDirection::Input,
            index,
        }
    }

    pub fn output(self, index: usize) -> PortRef {
        PortRef {
            node: self,
            direction: PortDirection::Output,
            index,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PortDirection {
    Input,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PortRef {
    pub node: NodeId,
    pub direction: PortDirection,
    pub index: usize,
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            PortDirection::Input => "in",
            PortDirection::Output => "out",
        };
        write!(f, "{}.{dir}{}", self.node, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableRef(pub(crate) usize);

/// Why an explicit shape rule rejected its inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeIssue {
    pub port: usize,
    pub expected: String,
    pub actual: String,
}

pub type ShapeFn = Arc<dyn Fn(&[&Shape]) -> Result<Shape, ShapeIssue> + Send + Sync>;

#[derive(Clone)]
pub enum ShapeRule {
    Constant(Shape),
    SameAsInput(usize),
    Explicit(ShapeFn),
}

impl ShapeRule {
    /// All inputs must share one shape; the output takes it.
    pub fn elementwise() -> Self {
        ShapeRule::Explicit(Arc::new(|shapes: &[&Shape]| {
            let first = shapes.first().ok_or_else(|| ShapeIssue {
                port: 0,
                expected: "at least one input".into(),
                actual: "none".into(),
            })?;
            for (port, shape) in shapes.iter().enumerate().skip(1) {
                if shape != first {
                    return Err(ShapeIssue {
                        port,
                        expected: first.to_string(),
                        actual: shape.to_string(),
                    });
                }
            }
            Ok((*first).clone())
        }))
    }

    fn apply(&self, inputs: &[&Shape]) -> Result<Shape, ShapeIssue> {
        match self {
            ShapeRule::Constant(shape) => Ok(shape.clone()),
            ShapeRule::SameAsInput(k) => Ok(inputs[*k].clone()),
            ShapeRule::Explicit(f) => f(inputs),
        }
    }
}

impl fmt::Debug for ShapeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeRule::Constant(s) => write!(f, "Constant({s})"),
            ShapeRule::SameAsInput(k) => write!(f, "SameAsInput({k})"),
            ShapeRule::Explicit(_) => f.write_str("Explicit(..)"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputPort {
    pub name: String,
    /// Required rank of the bound output, if constrained.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct OutputPort {
    pub name: String,
    pub shape: ShapeRule,
}

/// A named function with typed ports, variable slots and per-device kernels.
#[derive(Clone)]
pub struct TransformationSpec<T> {
    pub name: String,
    pub inputs: Vec<InputPort>,
    pub outputs: Vec<OutputPort>,
    pub variables: Vec<String>,
    pub kernels: BTreeMap<DeviceKind, KernelFn<T>>,
}

impl<T> fmt::Debug for TransformationSpec<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformationSpec")
            .field("name", &self.name)
            .field("inputs", &self.inputs)
            .field("outputs", &self.outputs)
            .field("variables", &self.variables)
            .field("kernels", &self.kernels.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl<T: Scalar> TransformationSpec<T> {
    pub fn new(name: impl Into<String>) -> Self {
        TransformationSpec {
            name: name.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            variables: Vec::new(),
            kernels: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: impl Into<String>, rank: Option<usize>) -> Self {
        self.inputs.push(InputPort {
            name: name.into(),
            rank,
        });
        self
    }

    pub fn output(mut self, name: impl Into<String>, shape: ShapeRule) -> Self {
        self.outputs.push(OutputPort {
            name: name.into(),
            shape,
        });
        self
    }

    pub fn variable(mut self, name: impl Into<String>) -> Self {
        self.variables.push(name.into());
        self
    }

    pub fn kernel(mut self, kind: DeviceKind, kernel: KernelFn<T>) -> Self {
        self.kernels.insert(kind, kernel);
        self
    }

    pub fn has_kernel(&self, kind: DeviceKind) -> bool {
        self.kernels.contains_key(&kind)
    }

    fn validate(&self) -> Result<(), String> {
        if self.outputs.is_empty() {
            return Err(format!("transformation `{}` must have at least one output", self.name));
        }
        if !self.has_kernel(DeviceKind::Host) {
            return Err(format!("transformation `{}` has no host kernel", self.name));
        }
        for out in &self.outputs {
            if let ShapeRule::SameAsInput(k) = out.shape {
                if k >= self.inputs.len() {
                    return Err(format!(
                        "output `{}` of `{}` copies the shape of missing input {k}",
                        out.name, self.name
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid transformation spec: {0}")]
    InvalidSpec(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown port {0}")]
    UnknownPort(PortRef),
    #[error("port {0} has the wrong direction for this operation")]
    WrongDirection(PortRef),
    #[error("input {0} is already bound")]
    AlreadyBound(PortRef),
    #[error("binding node {0} to itself")]
    SelfLoop(NodeId),
    #[error("variable name `{0}` is already taken")]
    DuplicateName(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(VariableRef),
    #[error("node {0} has no free variable slot")]
    NoFreeVariableSlot(NodeId),
    #[error("variable slot `{slot}` of node {node} is not attached")]
    UnboundVariable { node: NodeId, slot: String },
    #[error("cycle detected through nodes {0:?}")]
    CycleDetected(Vec<NodeId>),
    #[error("unbound inputs: {0:?}")]
    UnboundInput(Vec<PortRef>),
    #[error("shape mismatch at node {node} port {port}: expected {expected}, got {actual}")]
    ShapeMismatch {
        node: NodeId,
        port: usize,
        expected: String,
        actual: String,
    },
    #[error("node {node} has no kernel for {device}")]
    NoDeviceKernel { node: NodeId, device: DeviceSpec },
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

pub(crate) struct VariableState {
    pub(crate) name: String,
    pub(crate) value: f64,
    pub(crate) dependents: BTreeSet<NodeId>,
}

struct NodeState<T> {
    spec: Arc<TransformationSpec<T>>,
    tainted: bool,
    target: DeviceSpec,
    inputs: Vec<Option<PortRef>>,
    variables: Vec<VariableRef>,
}

/// Variable registry shared by both graph stages.
#[derive(Default)]
pub(crate) struct Variables {
    pub(crate) states: Vec<VariableState>,
    by_name: HashMap<String, VariableRef>,
}

impl Variables {
    fn make(&mut self, name: &str, value: f64) -> Result<VariableRef, GraphError> {
        if self.by_name.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let var = VariableRef(self.states.len());
        self.states.push(VariableState {
            name: name.to_string(),
            value,
            dependents: BTreeSet::new(),
        });
        self.by_name.insert(name.to_string(), var);
        Ok(var)
    }

    pub(crate) fn get(&self, var: VariableRef) -> Result<&VariableState, GraphError> {
        self.states.get(var.0).ok_or(GraphError::UnknownVariable(var))
    }

    pub(crate) fn get_mut(&mut self, var: VariableRef) -> Result<&mut VariableState, GraphError> {
        self.states.get_mut(var.0).ok_or(GraphError::UnknownVariable(var))
    }

    pub(crate) fn lookup(&self, name: &str) -> Option<VariableRef> {
        self.by_name.get(name).copied()
    }

    pub(crate) fn names(&self) -> impl Iterator<Item = (&str, VariableRef)> {
        self.states
            .iter()
            .enumerate()
            .map(|(i, v)| (v.name.as_str(), VariableRef(i)))
    }
}

/// Marks `start` and everything reachable from it through `children`.
pub(crate) fn taint_closure(children: &[Vec<usize>], start: usize, flags: &mut [bool]) {
    let mut stack = vec![start];
    let mut seen = vec![false; flags.len()];
    while let Some(n) = stack.pop() {
        if std::mem::replace(&mut seen[n], true) {
            continue;
        }
        flags[n] = true;
        stack.extend(children[n].iter().copied());
    }
}

/// Graph under construction.
pub struct Graph<T> {
    nodes: Vec<NodeState<T>>,
    variables: Variables,
    arena: ArenaConfig,
    recovery: RecoveryPolicy,
    checkpoint_every: Option<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new(ArenaConfig::default())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(arena: ArenaConfig) -> Self {
        Graph {
            nodes: Vec::new(),
            variables: Variables::default(),
            arena,
            recovery: RecoveryPolicy::Abort,
            checkpoint_every: None,
        }
    }

    pub fn arena_config(&self) -> &ArenaConfig {
        &self.arena
    }

    pub fn set_recovery_policy(&mut self, policy: RecoveryPolicy) {
        self.recovery = policy;
    }

    /// `Some(0)` is treated as disabled.
    pub fn set_checkpoint_policy(&mut self, every_n: Option<usize>) {
        self.checkpoint_every = every_n.filter(|&n| n > 0);
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn node(&self, id: NodeId) -> Result<&NodeState<T>, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    fn node_mut(&mut self, id: NodeId) -> Result<&mut NodeState<T>, GraphError> {
        self.nodes.get_mut(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn spec(&self, id: NodeId) -> Result<&TransformationSpec<T>, GraphError> {
        Ok(&self.node(id)?.spec)
    }

    pub fn add_node(&mut self, spec: TransformationSpec<T>) -> Result<NodeId, GraphError> {
        spec.validate().map_err(GraphError::InvalidSpec)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeState {
            inputs: vec![None; spec.inputs.len()],
            spec: Arc::new(spec),
            tainted: true,
            target: DeviceSpec::Host,
            variables: Vec::new(),
        });
        Ok(id)
    }

    fn check_port(&self, port: PortRef, direction: PortDirection) -> Result<(), GraphError> {
        let node = self.node(port.node)?;
        if port.direction != direction {
            return Err(GraphError::WrongDirection(port));
        }
        let count = match direction {
            PortDirection::Input => node.spec.inputs.len(),
            PortDirection::Output => node.spec.outputs.len(),
        };
        if port.index >= count {
            return Err(GraphError::UnknownPort(port));
        }
        Ok(())
    }

    /// Connects an output to an input. The input reads the output's data in place.
    pub fn bind(&mut self, src: PortRef, dst: PortRef) -> Result<(), GraphError> {
        self.check_port(src, PortDirection::Output)?;
        self.check_port(dst, PortDirection::Input)?;
        if src.node == dst.node {
            return Err(GraphError::SelfLoop(src.node));
        }
        let slot = &mut self.nodes[dst.node.0].inputs[dst.index];
        if slot.is_some() {
            return Err(GraphError::AlreadyBound(dst));
        }
        *slot = Some(src);
        Ok(())
    }

    pub fn make_variable(&mut self, name: &str, value: f64) -> Result<VariableRef, GraphError> {
        self.variables.make(name, value)
    }

    pub fn variable(&self, name: &str) -> Option<VariableRef> {
        self.variables.lookup(name)
    }

    /// Fills the next free variable slot of `node` with `var`.
    pub fn attach_variable(&mut self, node: NodeId, var: VariableRef) -> Result<(), GraphError> {
        self.variables.get(var)?;
        let state = self.node_mut(node)?;
        if state.variables.len() >= state.spec.variables.len() {
            return Err(GraphError::NoFreeVariableSlot(node));
        }
        state.variables.push(var);
        self.variables.get_mut(var)?.dependents.insert(node);
        Ok(())
    }

    pub fn dependents(&self, var: VariableRef) -> Result<Vec<NodeId>, GraphError> {
        Ok(self.variables.get(var)?.dependents.iter().copied().collect())
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut children = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for src in node.inputs.iter().flatten() {
                if !children[src.node.0].contains(&i) {
                    children[src.node.0].push(i);
                }
            }
        }
        children
    }

    pub fn set_variable(&mut self, var: VariableRef, value: f64) -> Result<(), GraphError> {
        let state = self.variables.get_mut(var)?;
        state.value = value;
        let dependents: Vec<NodeId> = state.dependents.iter().copied().collect();
        let children = self.children();
        let mut flags: Vec<bool> = self.nodes.iter().map(|n| n.tainted).collect();
        for node in dependents {
            taint_closure(&children, node.0, &mut flags);
        }
        self.apply_flags(&flags);
        Ok(())
    }

    pub fn taint(&mut self, node: NodeId) -> Result<(), GraphError> {
        self.node(node)?;
        let children = self.children();
        let mut flags: Vec<bool> = self.nodes.iter().map(|n| n.tainted).collect();
        taint_closure(&children, node.0, &mut flags);
        self.apply_flags(&flags);
        Ok(())
    }

    fn apply_flags(&mut self, flags: &[bool]) {
        for (node, &flag) in self.nodes.iter_mut().zip(flags) {
            node.tainted = flag;
        }
    }

    pub fn is_tainted(&self, node: NodeId) -> Result<bool, GraphError> {
        Ok(self.node(node)?.tainted)
    }

    /// Selects where the node's kernel runs.
    pub fn set_target_device(&mut self, node: NodeId, device: DeviceSpec) -> Result<(), GraphError> {
        let state = self.node_mut(node)?;
        if !state.spec.has_kernel(device.kind()) {
            return Err(GraphError::NoDeviceKernel { node, device });
        }
        state.target = device;
        Ok(())
    }

    pub fn target_device(&self, node: NodeId) -> Result<DeviceSpec, GraphError> {
        Ok(self.node(node)?.target)
    }

    /// One cycle as a node list, if the bindings contain any.
    fn find_cycle(&self, children: &[Vec<usize>]) -> Option<Vec<NodeId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let n = self.nodes.len();
        let mut mark = vec![Mark::New; n];
        for root in 0..n {
            if mark[root] != Mark::New {
                continue;
            }
            // (node, next child index)
            let mut stack = vec![(root, 0usize)];
            mark[root] = Mark::Open;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if let Some(&child) = children[node].get(*next) {
                    *next += 1;
                    match mark[child] {
                        Mark::New => {
                            mark[child] = Mark::Open;
                            stack.push((child, 0));
                        }
                        Mark::Open => {
                            let start = stack.iter().position(|&(v, _)| v == child).unwrap();
                            return Some(stack[start..].iter().map(|&(v, _)| NodeId(v)).collect());
                        }
                        Mark::Done => {}
                    }
                } else {
                    mark[node] = Mark::Done;
                    stack.pop();
                }
            }
        }
        None
    }

    /// Kahn's algorithm, smallest ready id first.
    fn topological_order(&self, children: &[Vec<usize>]) -> Vec<usize> {
        let mut indegree = vec![0usize; self.nodes.len()];
        for kids in children {
            for &k in kids {
                indegree[k] += 1;
            }
        }
        let mut ready: BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for &k in &children[n] {
                indegree[k] -= 1;
                if indegree[k] == 0 {
                    ready.insert(k);
                }
            }
        }
        order
    }

    /// Validates the graph, infers shapes and allocates all buffers.
    pub fn finalize(self) -> Result<ExecutableGraph<T>, GraphError> {
        let unbound: Vec<PortRef> = self
            .nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| {
                n.inputs
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.is_none())
                    .map(move |(p, _)| NodeId(i).input(p))
            })
            .collect();
        if !unbound.is_empty() {
            return Err(GraphError::UnboundInput(unbound));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(slot) = node.spec.variables.get(node.variables.len()) {
                return Err(GraphError::UnboundVariable {
                    node: NodeId(i),
                    slot: slot.clone(),
                });
            }
        }
        let children = self.children();
        if let Some(cycle) = self.find_cycle(&children) {
            return Err(GraphError::CycleDetected(cycle));
        }
        let order = self.topological_order(&children);

        let mut shapes: Vec<Vec<Shape>> = vec![Vec::new(); self.nodes.len()];
        for &i in &order {
            let node = &self.nodes[i];
            let sources: Vec<PortRef> = node.inputs.iter().map(|b| b.expect("bound")).collect();
            let in_shapes: Vec<&Shape> = sources.iter().map(|s| &shapes[s.node.0][s.index]).collect();
            for (port, (decl, shape)) in node.spec.inputs.iter().zip(&in_shapes).enumerate() {
                if let Some(rank) = decl.rank {
                    if shape.rank() != rank {
                        return Err(GraphError::ShapeMismatch {
                            node: NodeId(i),
                            port,
                            expected: format!("rank {rank}"),
                            actual: format!("rank {} {shape}", shape.rank()),
                        });
                    }
                }
            }
            let mut outs = Vec::with_capacity(node.spec.outputs.len());
            for out in &node.spec.outputs {
                let shape = out.shape.apply(&in_shapes).map_err(|issue| GraphError::ShapeMismatch {
                    node: NodeId(i),
                    port: issue.port,
                    expected: issue.expected,
                    actual: issue.actual,
                })?;
                outs.push(shape);
            }
            shapes[i] = outs;
        }

        let mut memory = Memory::new(&self.arena);
        let mut output_buffers = vec![Vec::new(); self.nodes.len()];
        for &i in &order {
            let node = &self.nodes[i];
            for (port, shape) in shapes[i].iter().enumerate() {
                let mut placement = vec![DeviceSpec::Host, node.target];
                for &c in &children[i] {
                    let consumer = &self.nodes[c];
                    let reads_port = consumer.inputs.iter().any(|b| *b == Some(NodeId(i).output(port)));
                    if reads_port {
                        placement.push(consumer.target);
                    }
                }
                let id = memory.allocate(shape.clone(), &placement)?;
                output_buffers[i].push(id);
            }
        }

        let nodes = self
            .nodes
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let sources: Vec<PortRef> = n.inputs.iter().map(|b| b.expect("bound")).collect();
                ExecNode {
                    input_buffers: sources.iter().map(|s| output_buffers[s.node.0][s.index]).collect(),
                    input_sources: sources,
                    output_buffers: output_buffers[i].clone(),
                    spec: n.spec,
                    target: n.target,
                    tainted: n.tainted,
                    variables: n.variables,
                    counters: Default::default(),
                }
            })
            .collect();
        Ok(ExecutableGraph::from_parts(
            nodes,
            children,
            order.into_iter().map(NodeId).collect(),
            self.variables,
            memory,
            self.recovery,
            self.checkpoint_every,
        ))
    }
}
