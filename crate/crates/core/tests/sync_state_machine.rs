//! Random operation sequences against a reference model of the host/device
//! synchronization rules.

use std::sync::Arc;

use lazyflow::{ArenaConfig, BufferId, DeviceSpec, KernelArgs, KernelFn, Memory, Shape, Side, SyncState};
use proptest::prelude::*;

const LEN: usize = 3;

#[derive(Clone, Debug)]
enum Op {
    Write(usize, f64),
    ToDevice(usize),
    ToHost(usize),
    Mark(usize, Side),
    Read(usize),
    Kernel { device: bool, src: usize, dst: usize },
}

/// Reference copy of one buffer.
#[derive(Clone, Debug)]
struct Model {
    host: Vec<f64>,
    device: Option<Vec<f64>>,
    state: SyncState,
}

fn op_strategy(n: usize) -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..n, -10.0..10.0f64).prop_map(|(i, v)| Op::Write(i, v)),
        (0..n).prop_map(Op::ToDevice),
        (0..n).prop_map(Op::ToHost),
        (0..n, any::<bool>()).prop_map(|(i, h)| Op::Mark(i, if h { Side::Host } else { Side::Device })),
        (0..n).prop_map(Op::Read),
        (any::<bool>(), 0..n, 0..n).prop_map(|(device, src, dst)| Op::Kernel { device, src, dst }),
    ]
}

fn plus_one() -> KernelFn<f64> {
    Arc::new(|args: &KernelArgs<'_, f64>, outs: &mut [&mut [f64]]| {
        for i in args.range.clone() {
            outs[0][i] = args.inputs[0][i] + 1.0;
        }
    })
}

struct Harness {
    mem: Memory<f64>,
    ids: Vec<BufferId>,
    model: Vec<Model>,
}

impl Harness {
    fn new() -> Self {
        let mut mem = Memory::new(&ArenaConfig::default());
        let mut ids = Vec::new();
        let mut model = Vec::new();
        for mirrored in [false, true, true, true] {
            let placement: &[DeviceSpec] = if mirrored {
                &[DeviceSpec::Sim(0)]
            } else {
                &[DeviceSpec::Host]
            };
            ids.push(mem.allocate(Shape::vector(LEN), placement).unwrap());
            model.push(Model {
                host: vec![0.0; LEN],
                device: mirrored.then(|| vec![0.0; LEN]),
                state: if mirrored {
                    SyncState::Synced
                } else {
                    SyncState::HostOnly
                },
            });
        }
        Harness { mem, ids, model }
    }

    fn step(&mut self, op: &Op) -> Result<(), TestCaseError> {
        let events_before = self.mem.transfer_log().events.len();
        let mut may_transfer = false;
        match *op {
            Op::Write(i, v) => {
                self.mem.write_host(self.ids[i], &[v; LEN]).unwrap();
                let m = &mut self.model[i];
                m.host = vec![v; LEN];
                if m.device.is_some() {
                    m.state = SyncState::HostDirty;
                }
            }
            Op::ToDevice(i) => {
                may_transfer = true;
                let m = &mut self.model[i];
                let res = self.mem.sync_to_device(self.ids[i]);
                match m.device.as_mut() {
                    None => prop_assert!(res.is_err()),
                    Some(dev) => {
                        res.unwrap();
                        if m.state == SyncState::HostDirty {
                            *dev = m.host.clone();
                            m.state = SyncState::Synced;
                        }
                    }
                }
            }
            Op::ToHost(i) => {
                may_transfer = true;
                self.mem.sync_to_host(self.ids[i]).unwrap();
                let m = &mut self.model[i];
                if m.state == SyncState::DeviceDirty {
                    m.host = m.device.clone().unwrap();
                    m.state = SyncState::Synced;
                }
            }
            Op::Mark(i, side) => {
                let res = self.mem.mark_dirty(self.ids[i], side);
                let m = &mut self.model[i];
                match (side, m.device.is_some()) {
                    (Side::Device, false) => prop_assert!(res.is_err()),
                    (Side::Host, false) => res.unwrap(),
                    (Side::Host, true) => {
                        res.unwrap();
                        m.state = SyncState::HostDirty;
                    }
                    (Side::Device, true) => {
                        res.unwrap();
                        m.state = SyncState::DeviceDirty;
                    }
                }
            }
            Op::Read(i) => {
                may_transfer = true;
                let got = self.mem.read_host(self.ids[i]).unwrap().to_vec();
                let m = &mut self.model[i];
                if m.state == SyncState::DeviceDirty {
                    m.host = m.device.clone().unwrap();
                    m.state = SyncState::Synced;
                }
                prop_assert_eq!(got, m.host.clone());
            }
            Op::Kernel { device, src, dst } => {
                if src == dst {
                    return Ok(());
                }
                let target = if device { DeviceSpec::Sim(0) } else { DeviceSpec::Host };
                let res = self
                    .mem
                    .dispatch_kernel(target, &plus_one(), &[self.ids[src]], &[self.ids[dst]], &[]);
                let (s, d) = (self.model[src].clone(), &mut self.model[dst]);
                if device {
                    let ok = d.device.is_some() && matches!(s.state, SyncState::Synced | SyncState::DeviceDirty);
                    prop_assert_eq!(res.is_ok(), ok);
                    if ok {
                        d.device = Some(s.device.unwrap().iter().map(|x| x + 1.0).collect());
                        d.state = SyncState::DeviceDirty;
                        // device results stay invisible on the host until synced
                        prop_assert_eq!(self.mem.peek_host(self.ids[dst]).unwrap(), None);
                    }
                } else {
                    let ok = s.state != SyncState::DeviceDirty;
                    prop_assert_eq!(res.is_ok(), ok);
                    if ok {
                        d.host = s.host.iter().map(|x| x + 1.0).collect();
                        if d.device.is_some() {
                            d.state = SyncState::HostDirty;
                        }
                    }
                }
            }
        }
        let log = self.mem.transfer_log();
        if !may_transfer {
            prop_assert_eq!(log.events.len(), events_before, "{:?} transferred", op);
        }
        prop_assert!(log.events.len() <= events_before + 1);
        let folded: u64 = log.events.iter().map(|e| e.bytes as u64).sum();
        prop_assert_eq!(folded, log.h2d_bytes + log.d2h_bytes);
        prop_assert!(log.events.iter().all(|e| e.bytes == LEN * 8));
        for (i, m) in self.model.iter().enumerate() {
            let buf = self.mem.buffer(self.ids[i]).unwrap();
            prop_assert_eq!(buf.sync_state(), m.state);
            prop_assert_eq!(buf.device().is_some(), m.device.is_some());
            if buf.device().is_none() {
                prop_assert_eq!(buf.sync_state(), SyncState::HostOnly);
            } else {
                prop_assert!(buf.sync_state() != SyncState::HostOnly);
            }
        }
        Ok(())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_sequences_follow_the_model(ops in prop::collection::vec(op_strategy(4), 1..200)) {
        let mut h = Harness::new();
        for op in &ops {
            h.step(op)?;
        }
    }
}
