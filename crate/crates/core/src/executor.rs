//! Computation stage: demand-driven evaluation over a finalized graph.
//!
//! Reading an output evaluates only the tainted part of its ancestor
//! closure, depth first with inputs visited in port order. Each node runs
//! on its target device; inputs are synchronized lazily, so host→device
//! copies happen only where host data enters a device node and
//! device→host copies only where device data is read on the host.

use std::sync::Arc;

use thiserror::Error;

use crate::graph::{
    taint_closure, GraphError, NodeId, PortDirection, PortRef, TransformationSpec, VariableRef, Variables,
};
use crate::memory::{BufferId, Clocks, DeviceSpec, FailurePolicy, Memory, MemoryError, Shape, TransferLog};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RecoveryPolicy {
    #[default]
    Abort,
    /// Re-run lost device work on host kernels and keep going.
    FallbackToHost,
}

/// Per-node execution counts, split by where the kernel ran.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NodeCounters {
    pub host: u64,
    pub device: u64,
}

impl NodeCounters {
    pub fn total(&self) -> u64 {
        self.host + self.device
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultEvent {
    pub node: NodeId,
    pub device: DeviceSpec,
    pub invocation: u64,
    /// Nodes re-tainted because their only valid data was on the device.
    pub retainted: Vec<NodeId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalStats {
    pub kernels_host: u64,
    pub kernels_device: u64,
    pub nodes_evaluated: Vec<(NodeId, DeviceSpec)>,
    pub transfers: TransferLog,
    pub checkpoints: u64,
    pub faults: Vec<FaultEvent>,
    pub clocks: Clocks,
}

impl EvalStats {
    pub fn kernels(&self) -> u64 {
        self.kernels_host + self.kernels_device
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("device fault on {device} while running node {node} (kernel invocation {invocation})")]
    DeviceFault {
        node: NodeId,
        device: DeviceSpec,
        invocation: u64,
    },
    #[error("evaluate_with_recovery requires the FallbackToHost policy")]
    RecoveryDisabled,
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Result of reading an output: the host data and what it took to get it.
#[derive(Debug)]
pub struct Evaluation<'a, T> {
    pub data: &'a [T],
    pub stats: EvalStats,
}

pub(crate) struct ExecNode<T> {
    pub(crate) spec: Arc<TransformationSpec<T>>,
    pub(crate) target: DeviceSpec,
    pub(crate) tainted: bool,
    pub(crate) variables: Vec<VariableRef>,
    pub(crate) input_sources: Vec<PortRef>,
    pub(crate) input_buffers: Vec<BufferId>,
    pub(crate) output_buffers: Vec<BufferId>,
    pub(crate) counters: NodeCounters,
}

/// A finalized graph with its allocated memory.
pub struct ExecutableGraph<T> {
    nodes: Vec<ExecNode<T>>,
    children: Vec<Vec<usize>>,
    topo: Vec<NodeId>,
    variables: Variables,
    memory: Memory<T>,
    recovery: RecoveryPolicy,
    checkpoint_every: Option<usize>,
}

impl<T: Scalar> ExecutableGraph<T> {
    pub(crate) fn from_parts(
        nodes: Vec<ExecNode<T>>,
        children: Vec<Vec<usize>>,
        topo: Vec<NodeId>,
        variables: Variables,
        memory: Memory<T>,
        recovery: RecoveryPolicy,
        checkpoint_every: Option<usize>,
    ) -> Self {
        ExecutableGraph {
            nodes,
            children,
            topo,
            variables,
            memory,
            recovery,
            checkpoint_every,
        }
    }

    fn node(&self, id: NodeId) -> Result<&ExecNode<T>, GraphError> {
        self.nodes.get(id.0).ok_or(GraphError::UnknownNode(id))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn topological_order(&self) -> &[NodeId] {
        &self.topo
    }

    pub fn spec(&self, id: NodeId) -> Result<&TransformationSpec<T>, GraphError> {
        Ok(&self.node(id)?.spec)
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.spec.name == name).map(NodeId)
    }

    pub fn inputs_of(&self, id: NodeId) -> Result<&[PortRef], GraphError> {
        Ok(&self.node(id)?.input_sources)
    }

    pub fn target_device(&self, id: NodeId) -> Result<DeviceSpec, GraphError> {
        Ok(self.node(id)?.target)
    }

    pub fn counters(&self, id: NodeId) -> Result<NodeCounters, GraphError> {
        Ok(self.node(id)?.counters)
    }

    pub fn is_tainted(&self, id: NodeId) -> Result<bool, GraphError> {
        Ok(self.node(id)?.tainted)
    }

    pub fn memory(&self) -> &Memory<T> {
        &self.memory
    }

    pub fn set_failure_policy(&mut self, policy: FailurePolicy) {
        self.memory.set_failure_policy(policy);
    }

    pub fn set_chunk_size(&mut self, chunk: Option<std::num::NonZeroUsize>) {
        self.memory.set_chunk_size(chunk);
    }

    pub fn reset_transfer_counters(&mut self) {
        self.memory.reset_counters();
    }

    pub fn recovery_policy(&self) -> RecoveryPolicy {
        self.recovery
    }

    pub fn set_recovery_policy(&mut self, policy: RecoveryPolicy) {
        self.recovery = policy;
    }

    /// Sync outputs to host after every `every_n` device kernels; `None` or 0 disables.
    pub fn set_checkpoint_policy(&mut self, every_n: Option<usize>) {
        self.checkpoint_every = every_n.filter(|&n| n > 0);
    }

    pub fn checkpoint_every(&self) -> Option<usize> {
        self.checkpoint_every
    }

    pub fn variable(&self, name: &str) -> Option<VariableRef> {
        self.variables.lookup(name)
    }

    pub fn variable_names(&self) -> impl Iterator<Item = (&str, VariableRef)> {
        self.variables.names()
    }

    pub fn variable_value(&self, var: VariableRef) -> Result<f64, GraphError> {
        Ok(self.variables.get(var)?.value)
    }

    /// Updates the value and taints every dependent and its descendants,
    /// whether or not the value changed. Nothing is evaluated.
    pub fn set_variable(&mut self, var: VariableRef, value: f64) -> Result<(), GraphError> {
        let state = self.variables.get_mut(var)?;
        state.value = value;
        let dependents: Vec<NodeId> = state.dependents.iter().copied().collect();
        let mut flags = self.flags();
        for node in dependents {
            taint_closure(&self.children, node.0, &mut flags);
        }
        self.apply_flags(&flags);
        Ok(())
    }

    pub fn taint(&mut self, node: NodeId) -> Result<(), GraphError> {
        self.node(node)?;
        let mut flags = self.flags();
        taint_closure(&self.children, node.0, &mut flags);
        self.apply_flags(&flags);
        Ok(())
    }

    fn flags(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| n.tainted).collect()
    }

    fn apply_flags(&mut self, flags: &[bool]) {
        for (node, &flag) in self.nodes.iter_mut().zip(flags) {
            node.tainted = flag;
        }
    }

    fn output_buffer(&self, port: PortRef) -> Result<BufferId, GraphError> {
        let node = self.node(port.node)?;
        if port.direction != PortDirection::Output {
            return Err(GraphError::WrongDirection(port));
        }
        node.output_buffers
            .get(port.index)
            .copied()
            .ok_or(GraphError::UnknownPort(port))
    }

    pub fn output_shape(&self, port: PortRef) -> Result<&Shape, ExecError> {
        let buf = self.output_buffer(port)?;
        Ok(self.memory.buffer(buf)?.shape())
    }

    pub fn output_buffer_id(&self, port: PortRef) -> Result<BufferId, GraphError> {
        self.output_buffer(port)
    }

    /// Where the node would run now: its target, or the host once the
    /// target device has failed.
    pub fn effective_device(&self, id: NodeId) -> Result<DeviceSpec, GraphError> {
        let node = self.node(id)?;
        let target = node.target;
        if target.is_host() || !self.memory.is_device_available(target) {
            return Ok(DeviceSpec::Host);
        }
        let mirrored = node.input_buffers.iter().chain(&node.output_buffers).all(|&b| {
            self.memory
                .buffer(b)
                .map(|buf| buf.device() == Some(target))
                .unwrap_or(false)
        });
        Ok(if mirrored { target } else { DeviceSpec::Host })
    }

    /// Tainted ancestors of `target` (inclusive) in execution order.
    fn schedule(&self, target: NodeId) -> Vec<usize> {
        let mut order = Vec::new();
        if !self.nodes[target.0].tainted {
            return order;
        }
        let mut visited = vec![false; self.nodes.len()];
        visited[target.0] = true;
        let mut stack = vec![(target.0, 0usize)];
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if let Some(src) = self.nodes[node].input_sources.get(*next) {
                *next += 1;
                let s = src.node.0;
                if self.nodes[s].tainted && !visited[s] {
                    visited[s] = true;
                    stack.push((s, 0));
                }
            } else {
                order.push(node);
                stack.pop();
            }
        }
        order
    }

    fn run(&mut self, target: NodeId, stats: &mut EvalStats) -> Result<(), ExecError> {
        let mut device_kernels = 0usize;
        let mut pending_checkpoint: Vec<BufferId> = Vec::new();
        for i in self.schedule(target) {
            let id = NodeId(i);
            let device = self.effective_device(id)?;
            let node = &self.nodes[i];
            let inputs = node.input_buffers.clone();
            let outputs = node.output_buffers.clone();
            for &buf in &inputs {
                if device.is_host() {
                    self.memory.sync_to_host(buf)?;
                } else {
                    self.memory.sync_to_device(buf)?;
                }
            }
            let vars: Vec<T> = node
                .variables
                .iter()
                .map(|&v| self.variables.get(v).map(|s| T::of(s.value)))
                .collect::<Result<_, _>>()?;
            let kernel = node
                .spec
                .kernels
                .get(&device.kind())
                .expect("kernel presence checked at configuration")
                .clone();
            match self.memory.dispatch_kernel(device, &kernel, &inputs, &outputs, &vars) {
                Ok(()) => {}
                Err(MemoryError::DeviceFault { device, invocation }) => {
                    return Err(ExecError::DeviceFault {
                        node: id,
                        device,
                        invocation,
                    })
                }
                Err(e) => return Err(e.into()),
            }
            let node = &mut self.nodes[i];
            node.tainted = false;
            stats.nodes_evaluated.push((id, device));
            if device.is_host() {
                node.counters.host += 1;
                stats.kernels_host += 1;
            } else {
                node.counters.device += 1;
                stats.kernels_device += 1;
                device_kernels += 1;
                pending_checkpoint.extend(&outputs);
                if let Some(every) = self.checkpoint_every {
                    if device_kernels.is_multiple_of(every) {
                        for buf in pending_checkpoint.drain(..) {
                            self.memory.sync_to_host(buf)?;
                        }
                        stats.checkpoints += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Drops the faulted device and re-taints producers of data that lived only there.
    fn recover(&mut self, node: NodeId, device: DeviceSpec, invocation: u64) -> Result<FaultEvent, ExecError> {
        let lost = self.memory.fail_device(device)?;
        let mut producers = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if n.output_buffers.iter().any(|b| lost.contains(b)) {
                producers.push(i);
            }
        }
        let before = self.flags();
        let mut flags = before.clone();
        for p in producers {
            taint_closure(&self.children, p, &mut flags);
        }
        self.apply_flags(&flags);
        let retainted = flags
            .iter()
            .zip(&before)
            .enumerate()
            .filter(|(_, (now, was))| **now && !**was)
            .map(|(i, _)| NodeId(i))
            .collect();
        Ok(FaultEvent {
            node,
            device,
            invocation,
            retainted,
        })
    }

    /// Reads `output`, computing whatever is stale in its ancestry first.
    ///
    /// A device fault is returned as an error under [`RecoveryPolicy::Abort`];
    /// under [`RecoveryPolicy::FallbackToHost`] the device is retired for the
    /// rest of the graph's life and the lost work is redone on the host.
    pub fn evaluate(&mut self, output: PortRef) -> Result<Evaluation<'_, T>, ExecError> {
        let buf = self.output_buffer(output)?;
        let mark = self.memory.transfer_log().events.len();
        let clocks = self.memory.clocks();
        let mut stats = EvalStats::default();
        loop {
            match self.run(output.node, &mut stats) {
                Ok(()) => break,
                Err(ExecError::DeviceFault {
                    node,
                    device,
                    invocation,
                }) if self.recovery == RecoveryPolicy::FallbackToHost => {
                    let event = self.recover(node, device, invocation)?;
                    stats.faults.push(event);
                }
                Err(e) => return Err(e),
            }
        }
        self.memory.sync_to_host(buf)?;
        let events = &self.memory.transfer_log().events;
        stats.transfers = TransferLog::from_events(&events[mark.min(events.len())..]);
        stats.clocks = self.memory.clocks().since(&clocks);
        let data = self.memory.peek_host(buf)?.expect("synced to host");
        Ok(Evaluation { data, stats })
    }

    /// [`Self::evaluate`], insisting on the fallback policy.
    pub fn evaluate_with_recovery(&mut self, output: PortRef) -> Result<Evaluation<'_, T>, ExecError> {
        if self.recovery != RecoveryPolicy::FallbackToHost {
            return Err(ExecError::RecoveryDisabled);
        }
        self.evaluate(output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::kernels::elementwise;
    use crate::memory::{ArenaConfig, Direction, SyncState};

    /// host source → k device `scale` nodes → host identity
    fn chain(k: usize) -> (ExecutableGraph<f64>, Vec<NodeId>) {
        let mut g = Graph::<f64>::new(ArenaConfig::default());
        let src = g
            .add_node(elementwise::constant("src", vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let two = g.make_variable("two", 2.0).unwrap();
        let mut nodes = vec![src];
        let mut prev = src;
        for i in 0..k {
            let n = g.add_node(elementwise::scale(&format!("t{}", i + 1))).unwrap();
            g.attach_variable(n, two).unwrap();
            g.set_target_device(n, DeviceSpec::Sim(0)).unwrap();
            g.bind(prev.output(0), n.input(0)).unwrap();
            nodes.push(n);
            prev = n;
        }
        let sink = g.add_node(elementwise::identity("sink")).unwrap();
        g.bind(prev.output(0), sink.input(0)).unwrap();
        nodes.push(sink);
        (g.finalize().unwrap(), nodes)
    }

    #[test]
    fn device_chain_transfers_once_each_way() {
        let (mut exec, nodes) = chain(3);
        let sink = *nodes.last().unwrap();
        let eval = exec.evaluate(sink.output(0)).unwrap();
        assert_eq!(eval.data, &[8.0, 16.0, 24.0, 32.0]);
        assert_eq!((eval.stats.transfers.h2d_count, eval.stats.transfers.d2h_count), (1, 1));
        assert_eq!((eval.stats.kernels_host, eval.stats.kernels_device), (2, 3));
        assert_eq!(eval.stats.transfers.events[0].direction, Direction::HostToDevice);
    }

    #[test]
    fn intermediate_read_costs_one_d2h() {
        let (mut exec, nodes) = chain(3);
        exec.evaluate(nodes.last().unwrap().output(0)).unwrap();
        let eval = exec.evaluate(nodes[1].output(0)).unwrap();
        assert_eq!(eval.data, &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!((eval.stats.transfers.h2d_count, eval.stats.transfers.d2h_count), (0, 1));
        assert_eq!(eval.stats.kernels(), 0);
    }

    #[test]
    fn clean_graph_is_a_cache_hit() {
        let (mut exec, nodes) = chain(2);
        let out = nodes.last().unwrap().output(0);
        let first = exec.evaluate(out).unwrap().data.to_vec();
        let again = exec.evaluate(out).unwrap();
        assert_eq!(again.data, first.as_slice());
        assert_eq!(again.stats.kernels(), 0);
        assert_eq!(again.stats.transfers.total_count(), 0);
    }

    #[test]
    fn variable_change_recomputes_device_part_only() {
        let (mut exec, nodes) = chain(2);
        let out = nodes.last().unwrap().output(0);
        exec.evaluate(out).unwrap();
        let two = exec.variable("two").unwrap();
        exec.set_variable(two, 3.0).unwrap();
        let eval = exec.evaluate(out).unwrap();
        assert_eq!(eval.data, &[9.0, 18.0, 27.0, 36.0]);
        // the source is clean and its device copy still valid
        assert_eq!((eval.stats.transfers.h2d_count, eval.stats.transfers.d2h_count), (0, 1));
        assert_eq!(exec.counters(nodes[0]).unwrap().total(), 1);
    }

    #[test]
    fn abort_policy_surfaces_fault_and_keeps_taint() {
        let (mut exec, nodes) = chain(3);
        exec.set_failure_policy(FailurePolicy::FailAtKernel(2));
        let out = nodes.last().unwrap().output(0);
        let err = exec.evaluate(out).unwrap_err();
        assert_eq!(
            err,
            ExecError::DeviceFault {
                node: nodes[2],
                device: DeviceSpec::Sim(0),
                invocation: 2
            }
        );
        assert!(exec.is_tainted(nodes[2]).unwrap());
        assert!(!exec.is_tainted(nodes[1]).unwrap());
        assert_eq!(
            exec.evaluate_with_recovery(out).unwrap_err(),
            ExecError::RecoveryDisabled
        );
        // the fault fired once; a retry completes on the device
        assert_eq!(exec.evaluate(out).unwrap().data, &[8.0, 16.0, 24.0, 32.0]);
    }

    #[test]
    fn fallback_reruns_lost_subchain_on_host() {
        let (mut exec, nodes) = chain(3);
        exec.set_recovery_policy(RecoveryPolicy::FallbackToHost);
        exec.set_failure_policy(FailurePolicy::FailAtKernel(3));
        let out = nodes.last().unwrap().output(0);
        let eval = exec.evaluate_with_recovery(out).unwrap();
        assert_eq!(eval.data, &[8.0, 16.0, 24.0, 32.0]);
        assert_eq!(eval.stats.faults.len(), 1);
        assert_eq!(eval.stats.faults[0].retainted, vec![nodes[1], nodes[2]]);
        for &n in &nodes[1..4] {
            assert_eq!(exec.counters(n).unwrap().host, 1, "{n}");
        }
        assert_eq!(exec.effective_device(nodes[1]).unwrap(), DeviceSpec::Host);
    }

    #[test]
    fn checkpoints_sync_each_device_output() {
        let (mut exec, nodes) = chain(3);
        exec.set_checkpoint_policy(Some(1));
        let out = nodes.last().unwrap().output(0);
        let eval = exec.evaluate(out).unwrap();
        assert_eq!(eval.stats.checkpoints, 3);
        assert_eq!((eval.stats.transfers.h2d_count, eval.stats.transfers.d2h_count), (1, 3));
        assert_eq!(
            exec.memory()
                .sync_state(exec.output_buffer_id(nodes[3].output(0)).unwrap())
                .unwrap(),
            SyncState::Synced
        );
    }

    #[test]
    fn checkpoint_limits_recovery_to_failed_node() {
        let (mut exec, nodes) = chain(3);
        exec.set_checkpoint_policy(Some(1));
        exec.set_recovery_policy(RecoveryPolicy::FallbackToHost);
        exec.set_failure_policy(FailurePolicy::FailAtKernel(3));
        let eval = exec.evaluate(nodes.last().unwrap().output(0)).unwrap();
        assert_eq!(eval.data, &[8.0, 16.0, 24.0, 32.0]);
        assert!(eval.stats.faults[0].retainted.is_empty());
        let hosts: Vec<u64> = nodes[1..4].iter().map(|&n| exec.counters(n).unwrap().host).collect();
        assert_eq!(hosts, vec![0, 0, 1]);
    }

    #[test]
    fn unknown_ports_are_rejected() {
        let (mut exec, nodes) = chain(1);
        assert!(matches!(
            exec.evaluate(nodes[0].output(4)),
            Err(ExecError::Graph(GraphError::UnknownPort(_)))
        ));
        assert!(matches!(
            exec.evaluate(nodes[1].input(0)),
            Err(ExecError::Graph(GraphError::WrongDirection(_)))
        ));
        assert!(matches!(
            exec.evaluate(NodeId(42).output(0)),
            Err(ExecError::Graph(GraphError::UnknownNode(_)))
        ));
    }
}
