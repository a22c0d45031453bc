//! Lazy, taint-driven computation graphs over host and simulated-device memory.
//!
//! Graphs are built in two stages. During configuration a [`Graph`] collects
//! transformations, bindings between their ports, and scalar variables;
//! [`Graph::finalize`] checks the structure, infers shapes and allocates every
//! buffer up front. The resulting [`ExecutableGraph`] evaluates outputs on
//! demand, recomputing only nodes tainted by a variable change, and keeps
//! host/device copies in sync with as few transfers as the placement allows.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below pin the common choices.

pub mod executor;
pub mod graph;
pub mod kernels;
pub mod memory;
pub mod scalar;

pub use executor::{EvalStats, Evaluation, ExecError, ExecutableGraph, FaultEvent, NodeCounters, RecoveryPolicy};
pub use graph::{
    Graph, GraphError, InputPort, NodeId, OutputPort, PortDirection, PortRef, ShapeIssue, ShapeRule,
    TransformationSpec, VariableRef,
};
pub use memory::{
    ArenaConfig, BufferId, Clocks, CostModel, DataBuffer, DeviceKind, DeviceSpec, Direction, FailurePolicy, KernelArgs,
    KernelFn, Memory, MemoryError, Shape, Side, SimArena, SyncState, TransferEvent, TransferLog,
};
pub use scalar::{Precision, Scalar};

pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ExecutableGraph64 = ExecutableGraph<f64>;
pub type ExecutableGraph32 = ExecutableGraph<f32>;
pub type Memory64 = Memory<f64>;
pub type Memory32 = Memory<f32>;
pub type TransformationSpec64 = TransformationSpec<f64>;
pub type TransformationSpec32 = TransformationSpec<f32>;
