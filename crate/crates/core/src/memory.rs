//! Host storage, the simulated device arena and the per-buffer
//! synchronization state machine.
//!
//! Every buffer has a host array. Buffers that are produced or consumed on a
//! simulated device additionally own a slot in that device's arena. Device
//! storage has no host-side read path: the only ways to move bytes across
//! the boundary are [`Memory::sync_to_device`] and [`Memory::sync_to_host`],
//! and every such move is appended to the [`TransferLog`].

use std::fmt;
use std::num::NonZeroUsize;
use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{Precision, Scalar};

/// Dimensions of a buffer. All dimensions are strictly positive.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    /// # Panics
    /// If `dims` is empty or contains a zero.
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        assert!(!dims.is_empty(), "shape must have at least one dimension");
        assert!(
            dims.iter().all(|&d| d > 0),
            "shape dimensions must be positive: {dims:?}"
        );
        Shape(dims)
    }

    pub fn vector(len: usize) -> Self {
        Shape::new(vec![len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Coarse device class used to key kernel implementations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceKind {
    Host,
    Sim,
}

/// A concrete execution place: the single host or one simulated device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DeviceSpec {
    Host,
    Sim(u8),
}

impl DeviceSpec {
    pub fn kind(self) -> DeviceKind {
        match self {
            DeviceSpec::Host => DeviceKind::Host,
            DeviceSpec::Sim(_) => DeviceKind::Sim,
        }
    }

    pub fn is_host(self) -> bool {
        matches!(self, DeviceSpec::Host)
    }
}

impl fmt::Display for DeviceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceSpec::Host => f.write_str("host"),
            DeviceSpec::Sim(id) => write!(f, "sim{id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SyncState {
    /// No device copy exists.
    HostOnly,
    Synced,
    /// Host copy is newer than the device copy.
    HostDirty,
    /// Device copy is newer than the host copy.
    DeviceDirty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Host,
    Device,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

impl BufferId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "buf{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DeviceHandle {
    device: u8,
    slot: usize,
}

#[derive(Debug)]
pub struct DataBuffer<T> {
    shape: Shape,
    host: Vec<T>,
    device: Option<DeviceHandle>,
    state: SyncState,
}

impl<T: Scalar> DataBuffer<T> {
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.host.len()
    }

    pub fn is_empty(&self) -> bool {
        self.host.is_empty()
    }

    pub fn sync_state(&self) -> SyncState {
        self.state
    }

    /// Device holding the mirror, if any.
    pub fn device(&self) -> Option<DeviceSpec> {
        self.device.map(|h| DeviceSpec::Sim(h.device))
    }

    pub fn size_bytes(&self) -> usize {
        self.host.len() * T::PRECISION.size_bytes()
    }

    fn host_valid(&self) -> bool {
        self.state != SyncState::DeviceDirty
    }

    fn device_valid(&self) -> bool {
        matches!(self.state, SyncState::Synced | SyncState::DeviceDirty)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferEvent {
    pub direction: Direction,
    pub bytes: usize,
    pub buffer: BufferId,
    pub device: DeviceSpec,
    /// Position in the global event sequence.
    pub seq: u64,
    /// Virtual time at which the transfer started.
    pub virtual_ns: f64,
}

/// Transfer counters and the event list they are folded from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferLog {
    pub h2d_count: u64,
    pub d2h_count: u64,
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub events: Vec<TransferEvent>,
}

impl TransferLog {
    pub fn from_events(events: &[TransferEvent]) -> Self {
        let mut log = TransferLog::default();
        for event in events {
            log.record(event.clone());
        }
        log
    }

    fn record(&mut self, event: TransferEvent) {
        match event.direction {
            Direction::HostToDevice => {
                self.h2d_count += 1;
                self.h2d_bytes += event.bytes as u64;
            }
            Direction::DeviceToHost => {
                self.d2h_count += 1;
                self.d2h_bytes += event.bytes as u64;
            }
        }
        self.events.push(event);
    }

    pub fn total_count(&self) -> u64 {
        self.h2d_count + self.d2h_count
    }
}

/// Virtual cost model. Transfers cost `latency_ns + bytes / bytes_per_ns`;
/// device kernels cost `kernel_launch_ns + elements / device_elements_per_ns`;
/// host kernels cost `elements * host_ns_per_element`. Nothing sleeps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    pub latency_ns: f64,
    pub bytes_per_ns: f64,
    pub kernel_launch_ns: f64,
    pub device_elements_per_ns: f64,
    pub host_ns_per_element: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            latency_ns: 10_000.0,
            bytes_per_ns: 12.0,
            kernel_launch_ns: 5_000.0,
            device_elements_per_ns: 50.0,
            host_ns_per_element: 20.0,
        }
    }
}

impl CostModel {
    pub fn transfer_ns(&self, bytes: usize) -> f64 {
        self.latency_ns + bytes as f64 / self.bytes_per_ns
    }

    pub fn device_kernel_ns(&self, elements: usize) -> f64 {
        self.kernel_launch_ns + elements as f64 / self.device_elements_per_ns
    }

    pub fn host_kernel_ns(&self, elements: usize) -> f64 {
        elements as f64 * self.host_ns_per_element
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum FailurePolicy {
    #[default]
    None,
    /// Fault on the n-th device dispatch (1-based, counted over the arena lifetime).
    FailAtKernel(u64),
    FailWithProbability {
        p: f64,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct ArenaConfig {
    /// Number of simulated devices; ids are `0..devices`.
    pub devices: u8,
    /// Per-device capacity in bytes; `None` is unbounded.
    pub capacity_bytes: Option<usize>,
    /// Elements per device kernel chunk; `None` processes the whole range at once.
    pub chunk_size: Option<NonZeroUsize>,
    pub cost: CostModel,
    pub failure: FailurePolicy,
}

impl Default for ArenaConfig {
    fn default() -> Self {
        ArenaConfig {
            devices: 1,
            capacity_bytes: None,
            chunk_size: None,
            cost: CostModel::default(),
            failure: FailurePolicy::None,
        }
    }
}

/// Accumulated virtual and measured times.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Clocks {
    pub transfer_virtual_ns: f64,
    pub device_compute_virtual_ns: f64,
    pub host_compute_virtual_ns: f64,
    pub device_wall_ns: u64,
    pub host_wall_ns: u64,
}

impl Clocks {
    pub fn since(&self, earlier: &Clocks) -> Clocks {
        Clocks {
            transfer_virtual_ns: self.transfer_virtual_ns - earlier.transfer_virtual_ns,
            device_compute_virtual_ns: self.device_compute_virtual_ns - earlier.device_compute_virtual_ns,
            host_compute_virtual_ns: self.host_compute_virtual_ns - earlier.host_compute_virtual_ns,
            device_wall_ns: self.device_wall_ns - earlier.device_wall_ns,
            host_wall_ns: self.host_wall_ns - earlier.host_wall_ns,
        }
    }

    pub fn add(&mut self, other: &Clocks) {
        self.transfer_virtual_ns += other.transfer_virtual_ns;
        self.device_compute_virtual_ns += other.device_compute_virtual_ns;
        self.host_compute_virtual_ns += other.host_compute_virtual_ns;
        self.device_wall_ns += other.device_wall_ns;
        self.host_wall_ns += other.host_wall_ns;
    }
}

/// Arguments handed to a kernel for one chunk of work.
///
/// `inputs` and the output slices are always full-length; a kernel must only
/// write output elements whose index lies in `range`.
pub struct KernelArgs<'a, T> {
    pub inputs: &'a [&'a [T]],
    pub vars: &'a [T],
    pub range: Range<usize>,
}

pub type KernelFn<T> = Arc<dyn Fn(&KernelArgs<'_, T>, &mut [&mut [T]]) + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("arena of {device} exhausted: requested {requested} bytes, {available} available")]
    ArenaExhausted {
        device: DeviceSpec,
        requested: usize,
        available: usize,
    },
    #[error("{0} has no device copy")]
    NoDeviceCopy(BufferId),
    #[error("unknown buffer {0}")]
    UnknownBuffer(BufferId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceSpec),
    #[error("device {0} is unavailable")]
    DeviceUnavailable(DeviceSpec),
    #[error("a buffer may be mirrored on at most one simulated device, got {0:?}")]
    PlacementConflict(Vec<DeviceSpec>),
    #[error("device fault on {device} at kernel invocation {invocation}")]
    DeviceFault { device: DeviceSpec, invocation: u64 },
    #[error("{buffer} has no valid copy on {device}")]
    StalePlacement { buffer: BufferId, device: DeviceSpec },
}

struct DeviceStore<T> {
    slots: Vec<Option<Vec<T>>>,
    used_bytes: usize,
    failed: bool,
}

/// Simulated device address spaces plus dispatch bookkeeping.
pub struct SimArena<T> {
    devices: Vec<DeviceStore<T>>,
    capacity_bytes: Option<usize>,
    chunk_size: Option<NonZeroUsize>,
    cost: CostModel,
    failure: FailurePolicy,
    rng: Option<ChaCha8Rng>,
    kernel_invocations: u64,
}

impl<T: Scalar> SimArena<T> {
    fn new(config: &ArenaConfig) -> Self {
        let devices = (0..config.devices)
            .map(|_| DeviceStore {
                slots: Vec::new(),
                used_bytes: 0,
                failed: false,
            })
            .collect();
        let mut arena = SimArena {
            devices,
            capacity_bytes: config.capacity_bytes,
            chunk_size: config.chunk_size,
            cost: config.cost,
            failure: FailurePolicy::None,
            rng: None,
            kernel_invocations: 0,
        };
        arena.set_failure_policy(config.failure);
        arena
    }

    fn set_failure_policy(&mut self, policy: FailurePolicy) {
        self.rng = match policy {
            FailurePolicy::FailWithProbability { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        self.failure = policy;
    }

    fn store(&self, device: u8) -> Result<&DeviceStore<T>, MemoryError> {
        self.devices
            .get(device as usize)
            .ok_or(MemoryError::UnknownDevice(DeviceSpec::Sim(device)))
    }

    fn store_mut(&mut self, device: u8) -> Result<&mut DeviceStore<T>, MemoryError> {
        self.devices
            .get_mut(device as usize)
            .ok_or(MemoryError::UnknownDevice(DeviceSpec::Sim(device)))
    }

    fn reserve(&mut self, device: u8, len: usize) -> Result<DeviceHandle, MemoryError> {
        let capacity = self.capacity_bytes;
        let store = self.store_mut(device)?;
        if store.failed {
            return Err(MemoryError::DeviceUnavailable(DeviceSpec::Sim(device)));
        }
        let bytes = len * T::PRECISION.size_bytes();
        if let Some(cap) = capacity {
            let available = cap.saturating_sub(store.used_bytes);
            if bytes > available {
                return Err(MemoryError::ArenaExhausted {
                    device: DeviceSpec::Sim(device),
                    requested: bytes,
                    available,
                });
            }
        }
        store.used_bytes += bytes;
        store.slots.push(Some(vec![T::zero(); len]));
        Ok(DeviceHandle {
            device,
            slot: store.slots.len() - 1,
        })
    }

    fn slot(&self, handle: DeviceHandle) -> &[T] {
        self.devices[handle.device as usize].slots[handle.slot]
            .as_deref()
            .expect("live device handle")
    }

    fn slot_mut(&mut self, handle: DeviceHandle) -> &mut Vec<T> {
        self.devices[handle.device as usize].slots[handle.slot]
            .as_mut()
            .expect("live device handle")
    }

    /// Counts the dispatch and decides whether it faults.
    fn admit(&mut self, device: u8) -> Result<(), MemoryError> {
        let spec = DeviceSpec::Sim(device);
        if self.store(device)?.failed {
            return Err(MemoryError::DeviceUnavailable(spec));
        }
        self.kernel_invocations += 1;
        let invocation = self.kernel_invocations;
        let fault = match self.failure {
            FailurePolicy::None => false,
            FailurePolicy::FailAtKernel(n) => invocation == n,
            FailurePolicy::FailWithProbability { p, .. } => self.rng.as_mut().expect("seeded rng").gen::<f64>() < p,
        };
        if fault {
            Err(MemoryError::DeviceFault {
                device: spec,
                invocation,
            })
        } else {
            Ok(())
        }
    }

    pub fn kernel_invocations(&self) -> u64 {
        self.kernel_invocations
    }

    pub fn chunk_size(&self) -> Option<NonZeroUsize> {
        self.chunk_size
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn failure_policy(&self) -> FailurePolicy {
        self.failure
    }

    pub fn device_count(&self) -> u8 {
        self.devices.len() as u8
    }

    pub fn is_failed(&self, device: u8) -> bool {
        self.devices.get(device as usize).is_none_or(|s| s.failed)
    }

    pub fn used_bytes(&self, device: u8) -> usize {
        self.devices.get(device as usize).map_or(0, |s| s.used_bytes)
    }
}

/// All numeric storage of one graph.
pub struct Memory<T> {
    buffers: Vec<DataBuffer<T>>,
    arena: SimArena<T>,
    log: TransferLog,
    seq: u64,
    host_kernels: u64,
    clocks: Clocks,
}

impl<T: Scalar> Default for Memory<T> {
    fn default() -> Self {
        Memory::new(&ArenaConfig::default())
    }
}

impl<T: Scalar> Memory<T> {
    pub fn new(config: &ArenaConfig) -> Self {
        Memory {
            buffers: Vec::new(),
            arena: SimArena::new(config),
            log: TransferLog::default(),
            seq: 0,
            host_kernels: 0,
            clocks: Clocks::default(),
        }
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn arena(&self) -> &SimArena<T> {
        &self.arena
    }

    pub fn set_failure_policy(&mut self, policy: FailurePolicy) {
        self.arena.set_failure_policy(policy);
    }

    pub fn set_chunk_size(&mut self, chunk: Option<NonZeroUsize>) {
        self.arena.chunk_size = chunk;
    }

    pub fn buffer(&self, id: BufferId) -> Result<&DataBuffer<T>, MemoryError> {
        self.buffers.get(id.0).ok_or(MemoryError::UnknownBuffer(id))
    }

    fn buffer_mut(&mut self, id: BufferId) -> Result<&mut DataBuffer<T>, MemoryError> {
        self.buffers.get_mut(id.0).ok_or(MemoryError::UnknownBuffer(id))
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.len()
    }

    pub fn sync_state(&self, id: BufferId) -> Result<SyncState, MemoryError> {
        Ok(self.buffer(id)?.state)
    }

    /// Allocates a zeroed buffer on the host and, when `placement` names a
    /// simulated device, a zeroed mirror on that device (state `Synced`).
    pub fn allocate(&mut self, shape: Shape, placement: &[DeviceSpec]) -> Result<BufferId, MemoryError> {
        let mut sims: Vec<DeviceSpec> = placement.iter().copied().filter(|d| !d.is_host()).collect();
        sims.sort();
        sims.dedup();
        if sims.len() > 1 {
            return Err(MemoryError::PlacementConflict(sims));
        }
        let len = shape.len();
        let device = match sims.first() {
            Some(DeviceSpec::Sim(id)) => Some(self.arena.reserve(*id, len)?),
            _ => None,
        };
        let state = if device.is_some() {
            SyncState::Synced
        } else {
            SyncState::HostOnly
        };
        self.buffers.push(DataBuffer {
            shape,
            host: vec![T::zero(); len],
            device,
            state,
        });
        Ok(BufferId(self.buffers.len() - 1))
    }

    fn log_transfer(&mut self, direction: Direction, id: BufferId, device: DeviceSpec, bytes: usize) {
        let event = TransferEvent {
            direction,
            bytes,
            buffer: id,
            device,
            seq: self.seq,
            virtual_ns: self.clocks.transfer_virtual_ns,
        };
        self.seq += 1;
        self.clocks.transfer_virtual_ns += self.arena.cost.transfer_ns(bytes);
        self.log.record(event);
    }

    /// Copies host data to the device mirror if the host side is newer.
    pub fn sync_to_device(&mut self, id: BufferId) -> Result<(), MemoryError> {
        let buf = self.buffer(id)?;
        let handle = buf.device.ok_or(MemoryError::NoDeviceCopy(id))?;
        if buf.state != SyncState::HostDirty {
            return Ok(());
        }
        let bytes = buf.size_bytes();
        let buf = &self.buffers[id.0];
        let dst = self.arena.devices[handle.device as usize].slots[handle.slot]
            .as_mut()
            .expect("live device handle");
        dst.copy_from_slice(&buf.host);
        self.buffers[id.0].state = SyncState::Synced;
        self.log_transfer(Direction::HostToDevice, id, DeviceSpec::Sim(handle.device), bytes);
        Ok(())
    }

    /// Copies the device mirror back to the host if the device side is newer.
    pub fn sync_to_host(&mut self, id: BufferId) -> Result<(), MemoryError> {
        let buf = self.buffer(id)?;
        if buf.state != SyncState::DeviceDirty {
            return Ok(());
        }
        let handle = buf.device.expect("DeviceDirty implies a device copy");
        let bytes = buf.size_bytes();
        let src = self.arena.slot(handle);
        self.buffers[id.0].host.copy_from_slice(src);
        self.buffers[id.0].state = SyncState::Synced;
        self.log_transfer(Direction::DeviceToHost, id, DeviceSpec::Sim(handle.device), bytes);
        Ok(())
    }

    /// Write barrier: records that `side` now holds the newest data.
    pub fn mark_dirty(&mut self, id: BufferId, side: Side) -> Result<(), MemoryError> {
        let buf = self.buffer_mut(id)?;
        match (side, buf.device) {
            (Side::Host, None) => {}
            (Side::Host, Some(_)) => buf.state = SyncState::HostDirty,
            (Side::Device, None) => return Err(MemoryError::NoDeviceCopy(id)),
            (Side::Device, Some(_)) => buf.state = SyncState::DeviceDirty,
        }
        Ok(())
    }

    /// Host view of a buffer, pulling the device copy first when it is newer.
    pub fn read_host(&mut self, id: BufferId) -> Result<&[T], MemoryError> {
        self.sync_to_host(id)?;
        Ok(&self.buffers[id.0].host)
    }

    /// Host view without any transfer; `None` while the device copy is newer.
    pub fn peek_host(&self, id: BufferId) -> Result<Option<&[T]>, MemoryError> {
        let buf = self.buffer(id)?;
        Ok(buf.host_valid().then_some(buf.host.as_slice()))
    }

    /// Overwrites the host copy and marks it as the newest side.
    ///
    /// # Panics
    /// If `data` does not match the buffer length.
    pub fn write_host(&mut self, id: BufferId, data: &[T]) -> Result<(), MemoryError> {
        let buf = self.buffer_mut(id)?;
        assert_eq!(buf.host.len(), data.len(), "length mismatch writing {id}");
        buf.host.copy_from_slice(data);
        self.mark_dirty(id, Side::Host)
    }

    /// Runs `kernel` on `device`.
    ///
    /// Host dispatch reads and writes host storage and marks outputs
    /// host-dirty. Device dispatch reads and writes arena storage in chunks
    /// and marks outputs device-dirty. A fault leaves every buffer untouched.
    pub fn dispatch_kernel(
        &mut self,
        device: DeviceSpec,
        kernel: &KernelFn<T>,
        inputs: &[BufferId],
        outputs: &[BufferId],
        vars: &[T],
    ) -> Result<(), MemoryError> {
        for &id in inputs.iter().chain(outputs) {
            self.buffer(id)?;
        }
        debug_assert!(
            outputs.iter().all(|o| !inputs.contains(o)),
            "kernel outputs must not alias inputs"
        );
        match device {
            DeviceSpec::Host => self.dispatch_host(kernel, inputs, outputs, vars),
            DeviceSpec::Sim(dev) => self.dispatch_device(dev, kernel, inputs, outputs, vars),
        }
    }

    fn dispatch_host(
        &mut self,
        kernel: &KernelFn<T>,
        inputs: &[BufferId],
        outputs: &[BufferId],
        vars: &[T],
    ) -> Result<(), MemoryError> {
        for &id in inputs {
            if !self.buffers[id.0].host_valid() {
                return Err(MemoryError::StalePlacement {
                    buffer: id,
                    device: DeviceSpec::Host,
                });
            }
        }
        let mut taken: Vec<Vec<T>> = outputs
            .iter()
            .map(|o| std::mem::take(&mut self.buffers[o.0].host))
            .collect();
        let elements = taken[0].len();
        let start = Instant::now();
        {
            let views: Vec<&[T]> = inputs.iter().map(|i| self.buffers[i.0].host.as_slice()).collect();
            let mut outs: Vec<&mut [T]> = taken.iter_mut().map(|v| v.as_mut_slice()).collect();
            let args = KernelArgs {
                inputs: &views,
                vars,
                range: 0..elements,
            };
            kernel(&args, &mut outs);
        }
        self.clocks.host_wall_ns += start.elapsed().as_nanos() as u64;
        self.clocks.host_compute_virtual_ns += self.arena.cost.host_kernel_ns(elements);
        self.host_kernels += 1;
        for (o, data) in outputs.iter().zip(taken) {
            self.buffers[o.0].host = data;
            self.mark_dirty(*o, Side::Host)?;
        }
        Ok(())
    }

    fn dispatch_device(
        &mut self,
        dev: u8,
        kernel: &KernelFn<T>,
        inputs: &[BufferId],
        outputs: &[BufferId],
        vars: &[T],
    ) -> Result<(), MemoryError> {
        let spec = DeviceSpec::Sim(dev);
        self.arena.store(dev)?;
        self.arena.admit(dev)?;
        let mut in_handles = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let buf = &self.buffers[id.0];
            match buf.device {
                Some(h) if h.device == dev && buf.device_valid() => in_handles.push(h),
                _ => {
                    return Err(MemoryError::StalePlacement {
                        buffer: id,
                        device: spec,
                    })
                }
            }
        }
        let mut out_handles = Vec::with_capacity(outputs.len());
        for &id in outputs {
            match self.buffers[id.0].device {
                Some(h) if h.device == dev => out_handles.push(h),
                _ => {
                    return Err(MemoryError::StalePlacement {
                        buffer: id,
                        device: spec,
                    })
                }
            }
        }
        let mut taken: Vec<Vec<T>> = out_handles
            .iter()
            .map(|&h| std::mem::take(self.arena.slot_mut(h)))
            .collect();
        let elements = taken[0].len();
        let chunk = self.arena.chunk_size.map_or(elements.max(1), NonZeroUsize::get);
        let start = Instant::now();
        {
            let views: Vec<&[T]> = in_handles.iter().map(|&h| self.arena.slot(h)).collect();
            let mut outs: Vec<&mut [T]> = taken.iter_mut().map(|v| v.as_mut_slice()).collect();
            let mut lo = 0;
            while lo < elements {
                let hi = (lo + chunk).min(elements);
                let args = KernelArgs {
                    inputs: &views,
                    vars,
                    range: lo..hi,
                };
                kernel(&args, &mut outs);
                lo = hi;
            }
        }
        self.clocks.device_wall_ns += start.elapsed().as_nanos() as u64;
        self.clocks.device_compute_virtual_ns += self.arena.cost.device_kernel_ns(elements);
        for ((&h, data), &id) in out_handles.iter().zip(taken).zip(outputs) {
            *self.arena.slot_mut(h) = data;
            self.buffers[id.0].state = SyncState::DeviceDirty;
        }
        Ok(())
    }

    /// Marks `device` permanently failed and drops every mirror on it.
    ///
    /// Returns the buffers whose newest data lived only on the device; their
    /// host copies are stale and must be recomputed.
    pub fn fail_device(&mut self, device: DeviceSpec) -> Result<Vec<BufferId>, MemoryError> {
        let DeviceSpec::Sim(dev) = device else {
            return Err(MemoryError::UnknownDevice(device));
        };
        let store = self.arena.store_mut(dev)?;
        store.failed = true;
        store.slots.iter_mut().for_each(|s| *s = None);
        store.used_bytes = 0;
        let mut lost = Vec::new();
        for (i, buf) in self.buffers.iter_mut().enumerate() {
            if buf.device.is_some_and(|h| h.device == dev) {
                if buf.state == SyncState::DeviceDirty {
                    lost.push(BufferId(i));
                }
                buf.device = None;
                buf.state = SyncState::HostOnly;
            }
        }
        Ok(lost)
    }

    pub fn is_device_available(&self, device: DeviceSpec) -> bool {
        match device {
            DeviceSpec::Host => true,
            DeviceSpec::Sim(dev) => !self.arena.is_failed(dev),
        }
    }

    pub fn transfer_log(&self) -> &TransferLog {
        &self.log
    }

    pub fn transfer_report(&self) -> TransferLog {
        self.log.clone()
    }

    /// Clears the transfer log. Kernel counters and clocks are lifetime totals.
    pub fn reset_counters(&mut self) {
        self.log = TransferLog::default();
    }

    pub fn host_kernels(&self) -> u64 {
        self.host_kernels
    }

    pub fn device_kernels(&self) -> u64 {
        self.arena.kernel_invocations
    }

    pub fn clocks(&self) -> Clocks {
        self.clocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doubler() -> KernelFn<f64> {
        Arc::new(|args: &KernelArgs<'_, f64>, outs: &mut [&mut [f64]]| {
            for i in args.range.clone() {
                outs[0][i] = 2.0 * args.inputs[0][i];
            }
        })
    }

    fn sim_memory(config: ArenaConfig) -> (Memory<f64>, BufferId, BufferId) {
        let mut mem = Memory::new(&config);
        let src = mem
            .allocate(Shape::vector(3), &[DeviceSpec::Host, DeviceSpec::Sim(0)])
            .unwrap();
        let dst = mem
            .allocate(Shape::vector(3), &[DeviceSpec::Host, DeviceSpec::Sim(0)])
            .unwrap();
        mem.write_host(src, &[1.0, 2.0, 3.0]).unwrap();
        mem.sync_to_device(src).unwrap();
        (mem, src, dst)
    }

    #[test]
    fn host_only_allocation_is_zeroed() {
        let mut mem = Memory::<f64>::default();
        let id = mem.allocate(Shape::vector(300), &[DeviceSpec::Host]).unwrap();
        assert_eq!(mem.sync_state(id).unwrap(), SyncState::HostOnly);
        assert!(mem.read_host(id).unwrap().iter().all(|&x| x == 0.0));
        assert_eq!(mem.read_host(id).unwrap().len(), 300);
    }

    #[test]
    fn mirrored_allocation_starts_synced() {
        let mut mem = Memory::<f64>::default();
        let id = mem
            .allocate(Shape::vector(4), &[DeviceSpec::Host, DeviceSpec::Sim(0)])
            .unwrap();
        assert_eq!(mem.sync_state(id).unwrap(), SyncState::Synced);
        assert_eq!(mem.read_host(id).unwrap(), &[0.0; 4]);
        assert_eq!(mem.transfer_log().total_count(), 0);
    }

    #[test]
    fn capacity_bound_is_enforced() {
        let mut mem = Memory::<f64>::new(&ArenaConfig {
            capacity_bytes: Some(64),
            ..ArenaConfig::default()
        });
        mem.allocate(Shape::vector(8), &[DeviceSpec::Sim(0)]).unwrap();
        let err = mem.allocate(Shape::vector(1), &[DeviceSpec::Sim(0)]).unwrap_err();
        assert!(matches!(
            err,
            MemoryError::ArenaExhausted {
                requested: 8,
                available: 0,
                ..
            }
        ));
        // host-only allocations are not bounded by the arena
        mem.allocate(Shape::vector(1000), &[DeviceSpec::Host]).unwrap();
    }

    #[test]
    fn two_devices_in_one_placement_conflict() {
        let mut mem = Memory::<f64>::new(&ArenaConfig {
            devices: 2,
            ..ArenaConfig::default()
        });
        let err = mem
            .allocate(Shape::vector(2), &[DeviceSpec::Sim(0), DeviceSpec::Sim(1)])
            .unwrap_err();
        assert!(matches!(err, MemoryError::PlacementConflict(_)));
        let err = mem.allocate(Shape::vector(2), &[DeviceSpec::Sim(5)]).unwrap_err();
        assert_eq!(err, MemoryError::UnknownDevice(DeviceSpec::Sim(5)));
    }

    #[test]
    fn sync_transitions() {
        let mut mem = Memory::<f64>::default();
        let id = mem.allocate(Shape::vector(4), &[DeviceSpec::Sim(0)]).unwrap();
        mem.sync_to_device(id).unwrap();
        assert_eq!(mem.transfer_log().total_count(), 0, "synced buffer must not transfer");

        mem.write_host(id, &[1.0; 4]).unwrap();
        assert_eq!(mem.sync_state(id).unwrap(), SyncState::HostDirty);
        mem.sync_to_device(id).unwrap();
        assert_eq!(mem.sync_state(id).unwrap(), SyncState::Synced);
        let log = mem.transfer_report();
        assert_eq!((log.h2d_count, log.h2d_bytes, log.d2h_count), (1, 32, 0));

        mem.mark_dirty(id, Side::Device).unwrap();
        mem.sync_to_device(id).unwrap();
        assert_eq!(mem.transfer_log().h2d_count, 1, "device side already newest");
        mem.sync_to_host(id).unwrap();
        assert_eq!(mem.sync_state(id).unwrap(), SyncState::Synced);
        assert_eq!(mem.transfer_log().d2h_count, 1);
    }

    #[test]
    fn mark_dirty_edges() {
        let mut mem = Memory::<f64>::default();
        let host = mem.allocate(Shape::vector(2), &[DeviceSpec::Host]).unwrap();
        let both = mem.allocate(Shape::vector(2), &[DeviceSpec::Sim(0)]).unwrap();
        mem.mark_dirty(both, Side::Host).unwrap();
        assert_eq!(mem.sync_state(both).unwrap(), SyncState::HostDirty);
        mem.mark_dirty(host, Side::Host).unwrap();
        assert_eq!(mem.sync_state(host).unwrap(), SyncState::HostOnly);
        assert_eq!(mem.mark_dirty(host, Side::Device), Err(MemoryError::NoDeviceCopy(host)));
        assert_eq!(mem.sync_to_device(host), Err(MemoryError::NoDeviceCopy(host)));
    }

    #[test]
    fn device_double_keeps_host_isolated() {
        let (mut mem, src, dst) = sim_memory(ArenaConfig::default());
        mem.dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
            .unwrap();
        assert_eq!(mem.sync_state(dst).unwrap(), SyncState::DeviceDirty);
        assert_eq!(mem.peek_host(dst).unwrap(), None);
        assert_eq!(mem.buffers[dst.0].host, vec![0.0; 3]);
        assert_eq!(mem.read_host(dst).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(mem.device_kernels(), 1);
    }

    #[test]
    fn fault_at_first_kernel_leaves_state() {
        let (mut mem, src, dst) = sim_memory(ArenaConfig {
            failure: FailurePolicy::FailAtKernel(1),
            ..ArenaConfig::default()
        });
        let before = (mem.sync_state(src).unwrap(), mem.sync_state(dst).unwrap());
        let err = mem
            .dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
            .unwrap_err();
        assert!(matches!(err, MemoryError::DeviceFault { invocation: 1, .. }));
        assert_eq!(before, (mem.sync_state(src).unwrap(), mem.sync_state(dst).unwrap()));
        assert_eq!(mem.device_kernels(), 1, "failed dispatch still counts");
        mem.dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
            .unwrap();
    }

    #[test]
    fn stale_input_is_rejected() {
        let mut mem = Memory::<f64>::default();
        let src = mem.allocate(Shape::vector(3), &[DeviceSpec::Sim(0)]).unwrap();
        let dst = mem.allocate(Shape::vector(3), &[DeviceSpec::Sim(0)]).unwrap();
        mem.write_host(src, &[1.0, 2.0, 3.0]).unwrap();
        let err = mem
            .dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
            .unwrap_err();
        assert!(matches!(err, MemoryError::StalePlacement { buffer, .. } if buffer == src));
    }

    #[test]
    fn chunked_dispatch_matches_unchunked() {
        let data = [0.5, -1.25, 3.0, 7.75, 1e-3];
        let run = |chunk: Option<usize>| {
            let mut mem = Memory::<f64>::new(&ArenaConfig {
                chunk_size: chunk.and_then(NonZeroUsize::new),
                ..ArenaConfig::default()
            });
            let src = mem.allocate(Shape::vector(5), &[DeviceSpec::Sim(0)]).unwrap();
            let dst = mem.allocate(Shape::vector(5), &[DeviceSpec::Sim(0)]).unwrap();
            mem.write_host(src, &data).unwrap();
            mem.sync_to_device(src).unwrap();
            mem.dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
                .unwrap();
            mem.read_host(dst).unwrap().to_vec()
        };
        let whole = run(None);
        let chunked = run(Some(2));
        assert_eq!(
            whole.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            chunked.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(whole, data.iter().map(|x| 2.0 * x).collect::<Vec<_>>());
    }

    #[test]
    fn failing_a_device_reports_lost_buffers() {
        let (mut mem, src, dst) = sim_memory(ArenaConfig::default());
        mem.dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
            .unwrap();
        let lost = mem.fail_device(DeviceSpec::Sim(0)).unwrap();
        assert_eq!(lost, vec![dst]);
        assert_eq!(mem.sync_state(src).unwrap(), SyncState::HostOnly);
        assert!(!mem.is_device_available(DeviceSpec::Sim(0)));
        let err = mem
            .dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
            .unwrap_err();
        assert_eq!(err, MemoryError::DeviceUnavailable(DeviceSpec::Sim(0)));
    }

    #[test]
    fn report_snapshot_is_immutable_and_resettable() {
        let mut mem = Memory::<f64>::default();
        assert_eq!(mem.transfer_report(), TransferLog::default());
        let id = mem.allocate(Shape::vector(4), &[DeviceSpec::Sim(0)]).unwrap();
        mem.write_host(id, &[1.0; 4]).unwrap();
        mem.sync_to_device(id).unwrap();
        let snap = mem.transfer_report();
        mem.write_host(id, &[2.0; 4]).unwrap();
        mem.sync_to_device(id).unwrap();
        assert_eq!(snap.h2d_count, 1);
        assert_eq!(mem.transfer_log().h2d_count, 2);
        mem.reset_counters();
        assert_eq!(mem.transfer_report(), TransferLog::default());
    }

    #[test]
    fn transfer_cost_accumulates_in_virtual_time() {
        let mut mem = Memory::<f64>::new(&ArenaConfig {
            cost: CostModel {
                latency_ns: 100.0,
                bytes_per_ns: 2.0,
                ..CostModel::default()
            },
            ..ArenaConfig::default()
        });
        let id = mem.allocate(Shape::vector(4), &[DeviceSpec::Sim(0)]).unwrap();
        mem.write_host(id, &[1.0; 4]).unwrap();
        mem.sync_to_device(id).unwrap();
        assert_eq!(mem.clocks().transfer_virtual_ns, 116.0);
    }

    #[test]
    fn probabilistic_failures_are_seeded() {
        let faults = |seed| {
            let (mut mem, src, dst) = sim_memory(ArenaConfig {
                failure: FailurePolicy::FailWithProbability { p: 0.3, seed },
                ..ArenaConfig::default()
            });
            (0..50)
                .map(|_| {
                    mem.dispatch_kernel(DeviceSpec::Sim(0), &doubler(), &[src], &[dst], &[])
                        .is_err()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(faults(7), faults(7));
        assert!(faults(7).iter().any(|&f| f));
        assert!(faults(7).iter().any(|&f| !f));
    }
}
