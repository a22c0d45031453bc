//! Report types and their JSON and text renderings.
//!
//! JSON field order follows the struct declarations and maps are ordered,
//! so equal reports serialize to equal bytes. Bump [`SCHEMA_VERSION`] when a
//! field changes meaning or disappears.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::{ReportFormat, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    /// A device fault stopped the run under the abort policy.
    Aborted,
}

/// Cost-model times in nanoseconds. `compute_only` is host plus device
/// kernel time; `inclusive` adds transfers.
#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct VirtualTimes {
    pub host_compute: f64,
    pub device_compute: f64,
    pub transfer: f64,
    pub compute_only: f64,
    pub inclusive: f64,
}

impl VirtualTimes {
    pub fn new(host_compute: f64, device_compute: f64, transfer: f64) -> Self {
        let compute_only = host_compute + device_compute;
        VirtualTimes {
            host_compute,
            device_compute,
            transfer,
            compute_only,
            inclusive: compute_only + transfer,
        }
    }

    pub fn add(&mut self, other: &VirtualTimes) {
        *self = VirtualTimes::new(
            self.host_compute + other.host_compute,
            self.device_compute + other.device_compute,
            self.transfer + other.transfer,
        );
    }
}

/// Monotonic-clock times in nanoseconds.
#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq, Eq)]
pub struct WallTimes {
    pub iteration: u64,
    pub host_kernels: u64,
    pub device_kernels: u64,
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct IterationRecord {
    pub index: u32,
    /// First iteration, evaluated from a fully tainted graph.
    pub cold: bool,
    pub kernels_host: u64,
    pub kernels_device: u64,
    pub h2d_count: u64,
    pub d2h_count: u64,
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub checkpoints: u64,
    pub faults: u64,
    pub virtual_ns: VirtualTimes,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ns: Option<WallTimes>,
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct Totals {
    pub kernels_host: u64,
    pub kernels_device: u64,
    pub h2d_count: u64,
    pub d2h_count: u64,
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub checkpoints: u64,
    pub faults: u64,
    pub virtual_ns: VirtualTimes,
}

impl Totals {
    pub fn from_iterations(records: &[IterationRecord]) -> Self {
        let mut t = Totals::default();
        for r in records {
            t.kernels_host += r.kernels_host;
            t.kernels_device += r.kernels_device;
            t.h2d_count += r.h2d_count;
            t.d2h_count += r.d2h_count;
            t.h2d_bytes += r.h2d_bytes;
            t.d2h_bytes += r.d2h_bytes;
            t.checkpoints += r.checkpoints;
            t.faults += r.faults;
            t.virtual_ns.add(&r.virtual_ns);
        }
        t
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq)]
pub struct Spread {
    pub min: f64,
    pub median: f64,
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Spread::default();
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Spread { min: v[0], median }
    }
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct Timings {
    pub compute_only_virtual_ns: Spread,
    pub inclusive_virtual_ns: Spread,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iteration_wall_ns: Option<Spread>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Checksum {
    pub len: usize,
    /// Sum of the values taken in ascending order, so element order does not matter.
    pub sum: f64,
    /// SHA-256 of the little-endian element bytes, in element order.
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Note {
        message: String,
    },
    Vary {
        iteration: u32,
        variable: String,
        value: f64,
    },
    Fault {
        iteration: u32,
        node: String,
        device: String,
        invocation: u64,
        /// `fallback_to_host` or `abort`.
        recovery: String,
        retainted: Vec<String>,
    },
}

/// Host-only against device-enabled run of the same configuration.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Comparison {
    pub host_run: VirtualTimes,
    pub device_run: VirtualTimes,
    /// Host-only compute over device-run compute.
    pub ratio_compute_only: f64,
    /// Host-only compute over device-run compute plus transfers.
    pub ratio_inclusive: f64,
    pub max_relative_difference: f64,
    pub checksums_equal: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunReport {
    pub schema_version: u32,
    pub status: Status,
    pub config: RunConfig,
    pub iterations: Vec<IterationRecord>,
    pub totals: Totals,
    pub timings: Timings,
    pub checksums: BTreeMap<String, Checksum>,
    pub events: Vec<Event>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl RunReport {
    pub fn aborted(&self) -> bool {
        self.status == Status::Aborted
    }
}

fn render_text(r: &RunReport) -> String {
    let mut s = String::new();
    let c = &r.config;
    let _ = writeln!(s, "lazyflow-bench report (schema {})", r.schema_version);
    let _ = writeln!(
        s,
        "graph {}  precision {}  device {}  energies {}  iterations {}  seed {}",
        c.graph.name(),
        c.precision,
        if c.device_enabled { "on" } else { "off" },
        c.energies.len(),
        c.iterations,
        c.seed
    );
    if c.vary.is_empty() {
        let _ = writeln!(s, "vary: (none)");
    } else {
        let _ = writeln!(s, "vary: {}", c.vary.join(", "));
    }
    let _ = writeln!(
        s,
        "{:>5} {:>4} {:>7} {:>7} {:>5} {:>5} {:>12} {:>12} {:>14} {:>14} {:>14}",
        "iter",
        "cold",
        "k_host",
        "k_dev",
        "h2d",
        "d2h",
        "h2d_bytes",
        "d2h_bytes",
        "compute_ns",
        "transfer_ns",
        "inclusive_ns"
    );
    for it in &r.iterations {
        let _ = writeln!(
            s,
            "{:>5} {:>4} {:>7} {:>7} {:>5} {:>5} {:>12} {:>12} {:>14.0} {:>14.0} {:>14.0}",
            it.index,
            if it.cold { "yes" } else { "" },
            it.kernels_host,
            it.kernels_device,
            it.h2d_count,
            it.d2h_count,
            it.h2d_bytes,
            it.d2h_bytes,
            it.virtual_ns.compute_only,
            it.virtual_ns.transfer,
            it.virtual_ns.inclusive
        );
    }
    let t = &r.totals;
    let _ = writeln!(
        s,
        "totals: kernels host {} device {}; h2d {} ({} B); d2h {} ({} B); checkpoints {}; faults {}",
        t.kernels_host, t.kernels_device, t.h2d_count, t.h2d_bytes, t.d2h_count, t.d2h_bytes, t.checkpoints, t.faults
    );
    let _ = writeln!(
        s,
        "virtual ns: host compute {:.0}, device compute {:.0}, transfer {:.0}, inclusive {:.0}",
        t.virtual_ns.host_compute, t.virtual_ns.device_compute, t.virtual_ns.transfer, t.virtual_ns.inclusive
    );
    if let Some(w) = r.timings.iteration_wall_ns {
        let _ = writeln!(s, "wall ns per iteration: min {:.0}, median {:.0}", w.min, w.median);
    }
    for (name, c) in &r.checksums {
        let _ = writeln!(s, "checksum {name}: len {} sum {:e} sha256 {}", c.len, c.sum, c.sha256);
    }
    if let Some(cmp) = &r.comparison {
        let _ = writeln!(s, "host-only / device compute-only: {:.4}", cmp.ratio_compute_only);
        let _ = writeln!(s, "host-only / (device compute + transfer): {:.4}", cmp.ratio_inclusive);
        let _ = writeln!(
            s,
            "max relative difference {:e}; checksums {}",
            cmp.max_relative_difference,
            if cmp.checksums_equal { "equal" } else { "differ" }
        );
        if let Some(w) = cmp.wall_ratio {
            let _ = writeln!(s, "host-only / device wall: {w:.4}");
        }
    }
    for e in &r.events {
        match e {
            Event::Note { message } => {
                let _ = writeln!(s, "note: {message}");
            }
            Event::Vary {
                iteration,
                variable,
                value,
            } => {
                let _ = writeln!(s, "iteration {iteration}: {variable} = {value:e}");
            }
            Event::Fault {
                iteration,
                node,
                device,
                invocation,
                recovery,
                retainted,
            } => {
                let _ = writeln!(
                    s,
                    "iteration {iteration}: fault on {device} at kernel {invocation} in {node}; {recovery}; re-tainted [{}]",
                    retainted.join(", ")
                );
            }
        }
    }
    if r.aborted() {
        let _ = writeln!(s, "status: aborted");
    }
    s
}

/// Serializes a report. The same report always yields the same bytes.
pub fn emit_report(report: &RunReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report is plain data");
            out.push(b'\n');
            out
        }
        ReportFormat::Text => render_text(report).into_bytes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_even_and_odd() {
        assert_eq!(Spread::of([3.0, 1.0, 2.0]), Spread { min: 1.0, median: 2.0 });
        assert_eq!(Spread::of([4.0, 1.0, 2.0, 3.0]), Spread { min: 1.0, median: 2.5 });
        assert_eq!(Spread::of([]), Spread::default());
    }

    #[test]
    fn totals_fold_iterations() {
        let it = |k: u64| IterationRecord {
            kernels_host: k,
            h2d_bytes: 8 * k,
            virtual_ns: VirtualTimes::new(k as f64, 1.0, 2.0),
            ..IterationRecord::default()
        };
        let t = Totals::from_iterations(&[it(1), it(2)]);
        assert_eq!(t.kernels_host, 3);
        assert_eq!(t.h2d_bytes, 24);
        assert_eq!(t.virtual_ns, VirtualTimes::new(3.0, 2.0, 4.0));
    }
}
