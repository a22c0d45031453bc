//! The timed evaluation loop.

use std::collections::BTreeMap;
use std::time::Instant;

use lazyflow::{ExecError, Precision, Scalar, VariableRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::build::{build_graph, BuildError, BuiltGraph};
use crate::config::{device_disabled_by_env, RunConfig, DISABLE_DEVICE_ENV};
use crate::report::{
    Checksum, Comparison, Event, IterationRecord, RunReport, Spread, Status, Timings, Totals, VirtualTimes, WallTimes,
    SCHEMA_VERSION,
};

/// Relative size of the per-iteration perturbation applied to `vary` variables.
pub const VARY_SPREAD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// A finished run: the report plus the final outputs widened to `f64`.
pub struct RunOutput {
    pub report: RunReport,
    pub outputs: BTreeMap<String, Vec<f64>>,
}

pub fn checksum<T: Scalar>(data: &[T]) -> Checksum {
    let mut sorted: Vec<f64> = data.iter().map(|x| x.as_f64()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut bytes = Vec::with_capacity(data.len() * T::PRECISION.size_bytes());
    for &x in data {
        x.append_le_bytes(&mut bytes);
    }
    let digest = Sha256::digest(&bytes);
    Checksum {
        len: data.len(),
        sum: sorted.iter().sum(),
        sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
    }
}

fn run_typed<T: Scalar>(cfg: &RunConfig, device_enabled: bool) -> Result<RunOutput, RunError> {
    let mut built: BuiltGraph<T> = build_graph(cfg, device_enabled)?;
    let mut events = Vec::new();
    if cfg.device_enabled && !device_enabled {
        events.push(Event::Note {
            message: format!("device backend disabled by {DISABLE_DEVICE_ENV}"),
        });
    }
    if cfg.vary.is_empty() {
        events.push(Event::Note {
            message: "vary is empty; iterations after the first reuse cached outputs".into(),
        });
    }
    let varied: Vec<(String, VariableRef, f64)> = cfg
        .vary
        .iter()
        .map(|name| {
            let var = built.exec.variable(name).expect("checked while building");
            let base = built.exec.variable_value(var).expect("live variable");
            (name.clone(), var, base)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.iterations as usize);
    let mut outputs = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    let mut status = Status::Completed;

    'iterations: for index in 0..cfg.iterations {
        if index > 0 {
            for (name, var, base) in &varied {
                let value = base * (1.0 + VARY_SPREAD * rng.gen_range(-1.0..1.0));
                built.exec.set_variable(*var, value).map_err(ExecError::from)?;
                events.push(Event::Vary {
                    iteration: index,
                    variable: name.clone(),
                    value,
                });
            }
        }
        let last = index + 1 == cfg.iterations;
        let started = Instant::now();
        let mut rec = IterationRecord {
            index,
            cold: index == 0,
            ..IterationRecord::default()
        };
        let (mut host_ns, mut device_ns, mut transfer_ns) = (0.0, 0.0, 0.0);
        let (mut host_wall, mut device_wall) = (0, 0);
        for (name, port) in built.outputs.clone() {
            let eval = match built.exec.evaluate(port) {
                Ok(eval) => eval,
                Err(ExecError::DeviceFault {
                    node,
                    device,
                    invocation,
                }) => {
                    let node = built.node_name(node);
                    events.push(Event::Fault {
                        iteration: index,
                        node,
                        device: device.to_string(),
                        invocation,
                        recovery: "abort".into(),
                        retainted: Vec::new(),
                    });
                    status = Status::Aborted;
                    rec.faults += 1;
                    records.push(rec);
                    break 'iterations;
                }
                Err(e) => return Err(e.into()),
            };
            let s = &eval.stats;
            rec.kernels_host += s.kernels_host;
            rec.kernels_device += s.kernels_device;
            rec.h2d_count += s.transfers.h2d_count;
            rec.d2h_count += s.transfers.d2h_count;
            rec.h2d_bytes += s.transfers.h2d_bytes;
            rec.d2h_bytes += s.transfers.d2h_bytes;
            rec.checkpoints += s.checkpoints;
            rec.faults += s.faults.len() as u64;
            host_ns += s.clocks.host_compute_virtual_ns;
            device_ns += s.clocks.device_compute_virtual_ns;
            transfer_ns += s.clocks.transfer_virtual_ns;
            host_wall += s.clocks.host_wall_ns;
            device_wall += s.clocks.device_wall_ns;
            let faults = s.faults.clone();
            if last {
                checksums.insert(name.clone(), checksum(eval.data));
                outputs.insert(name, eval.data.iter().map(|x| x.as_f64()).collect());
            }
            for f in faults {
                events.push(Event::Fault {
                    iteration: index,
                    node: built.node_name(f.node),
                    device: f.device.to_string(),
                    invocation: f.invocation,
                    recovery: "fallback_to_host".into(),
                    retainted: f.retainted.iter().map(|&n| built.node_name(n)).collect(),
                });
            }
        }
        rec.virtual_ns = VirtualTimes::new(host_ns, device_ns, transfer_ns);
        if cfg.report.wall_clock {
            rec.wall_ns = Some(WallTimes {
                iteration: started.elapsed().as_nanos() as u64,
                host_kernels: host_wall,
                device_kernels: device_wall,
            });
        }
        records.push(rec);
    }

    let timings = Timings {
        compute_only_virtual_ns: Spread::of(records.iter().map(|r| r.virtual_ns.compute_only)),
        inclusive_virtual_ns: Spread::of(records.iter().map(|r| r.virtual_ns.inclusive)),
        iteration_wall_ns: cfg
            .report
            .wall_clock
            .then(|| Spread::of(records.iter().filter_map(|r| r.wall_ns).map(|w| w.iteration as f64))),
    };
    let mut echo = cfg.clone();
    echo.device_enabled = device_enabled;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        status,
        config: echo,
        totals: Totals::from_iterations(&records),
        iterations: records,
        timings,
        checksums,
        events,
        comparison: None,
    };
    Ok(RunOutput { report, outputs })
}

/// Runs with an explicit device switch, ignoring the environment.
pub fn run_with_device(cfg: &RunConfig, device_enabled: bool) -> Result<RunOutput, RunError> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, device_enabled),
        Precision::F64 => run_typed::<f64>(cfg, device_enabled),
    }
}

/// Runs `cfg`, honoring `device_enabled` and the process-wide disable switch.
pub fn run(cfg: &RunConfig) -> Result<RunReport, RunError> {
    let device = cfg.device_enabled && !device_disabled_by_env();
    Ok(run_with_device(cfg, device)?.report)
}

/// Largest `|a - b| / max(|a|, |b|)` over all outputs; zero when both are zero.
pub fn max_relative_difference(a: &BTreeMap<String, Vec<f64>>, b: &BTreeMap<String, Vec<f64>>) -> f64 {
    let mut worst = 0.0f64;
    for (name, xs) in a {
        let Some(ys) = b.get(name) else {
            return f64::INFINITY;
        };
        if xs.len() != ys.len() {
            return f64::INFINITY;
        }
        for (x, y) in xs.iter().zip(ys) {
            let scale = x.abs().max(y.abs());
            if scale > 0.0 {
                worst = worst.max((x - y).abs() / scale);
            }
        }
    }
    worst
}

/// Runs the configuration host-only and device-enabled and reports the
/// device run with a [`Comparison`] attached.
pub fn run_comparison(cfg: &RunConfig) -> Result<RunReport, RunError> {
    let host = run_with_device(cfg, false)?;
    let device_on = cfg.device_enabled && !device_disabled_by_env();
    let device = run_with_device(cfg, device_on)?;
    let h = host.report.totals.virtual_ns;
    let d = device.report.totals.virtual_ns;
    let wall = |r: &RunReport| -> Option<f64> {
        r.iterations
            .iter()
            .map(|i| i.wall_ns.map(|w| w.iteration as f64))
            .sum::<Option<f64>>()
    };
    let wall_ratio = match (wall(&host.report), wall(&device.report)) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let mut report = device.report;
    report.comparison = Some(Comparison {
        host_run: h,
        device_run: d,
        ratio_compute_only: h.compute_only / d.compute_only,
        ratio_inclusive: h.compute_only / d.inclusive,
        max_relative_difference: max_relative_difference(&host.outputs, &device.outputs),
        checksums_equal: host.report.checksums == report.checksums,
        wall_ratio,
    });
    Ok(report)
}
