//! Run configuration: TOML text in, validated [`RunConfig`] out.
//!
//! The grammar is documented in the crate README. Every key is optional
//! except `[graph]`; defaults are filled in by [`parse_config`].

use std::collections::BTreeMap;
use std::fmt;
use std::num::NonZeroUsize;

use lazyflow::kernels::Flavor;
use lazyflow::{CostModel, DeviceSpec, Precision};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Set to anything but `""` or `"0"` to keep every node on the host.
pub const DISABLE_DEVICE_ENV: &str = "LAZYFLOW_DISABLE_DEVICE";

pub fn device_disabled_by_env() -> bool {
    std::env::var(DISABLE_DEVICE_ENV)
        .map(|v| !v.is_empty() && v != "0")
        .unwrap_or(false)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid `{field}`: {message}")]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ValidationError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

// ---------------------------------------------------------------------------
// raw, as written

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    graph: Option<RawGraph>,
    precision: Option<String>,
    device_enabled: Option<bool>,
    iterations: Option<i64>,
    seed: Option<u64>,
    vary: Option<Vec<String>>,
    baselines: Option<Vec<f64>>,
    energies: Option<RawEnergies>,
    osc_params: Option<RawOsc>,
    placement: Option<RawPlacement>,
    simulator: Option<RawSimulator>,
    failure: Option<RawFailure>,
    report: Option<RawReport>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    builtin: Option<String>,
    alpha: Option<String>,
    beta: Option<String>,
    weights: Option<Vec<f64>>,
    length: Option<i64>,
    factor: Option<f64>,
    #[serde(default)]
    nodes: Vec<NodeDecl>,
    #[serde(default)]
    edges: Vec<EdgeDecl>,
    #[serde(default)]
    outputs: Vec<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawEnergies {
    values: Option<Vec<f64>>,
    min: Option<f64>,
    max: Option<f64>,
    count: Option<i64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOsc {
    theta12: Option<f64>,
    theta13: Option<f64>,
    theta23: Option<f64>,
    delta_cp: Option<f64>,
    dm2_21: Option<f64>,
    dm2_31: Option<f64>,
    antineutrino: Option<bool>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPlacement {
    default: Option<String>,
    #[serde(default)]
    nodes: BTreeMap<String, String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSimulator {
    devices: Option<i64>,
    arena_capacity: Option<i64>,
    chunk_size: Option<i64>,
    latency_ns: Option<f64>,
    bytes_per_ns: Option<f64>,
    kernel_launch_ns: Option<f64>,
    device_elements_per_ns: Option<f64>,
    host_ns_per_element: Option<f64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFailure {
    at_kernel: Option<i64>,
    probability: Option<f64>,
    seed: Option<u64>,
    recovery: Option<String>,
    checkpoint_every: Option<i64>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawReport {
    format: Option<String>,
    wall_clock: Option<bool>,
}

// ---------------------------------------------------------------------------
// resolved

/// One node of a hand-written graph.
#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeDecl {
    pub name: String,
    /// `energies`, `constant`, `identity`, `scale`, `add`, `product` or `weighted_sum`.
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EdgeDecl {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub port: usize,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphConfig {
    /// Shared energy node, one oscillation subchain per baseline, weighted merge.
    Oscprob {
        alpha: String,
        beta: String,
        weights: Vec<f64>,
    },
    /// Host energies, `length` device `scale` nodes, host sink.
    Chain { length: usize, factor: f64 },
    Custom {
        nodes: Vec<NodeDecl>,
        edges: Vec<EdgeDecl>,
        outputs: Vec<String>,
    },
}

impl GraphConfig {
    pub fn name(&self) -> &'static str {
        match self {
            GraphConfig::Oscprob { .. } => "oscprob",
            GraphConfig::Chain { .. } => "chain",
            GraphConfig::Custom { .. } => "custom",
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Energies {
    Values { values: Vec<f64> },
    Linspace { min: f64, max: f64, count: usize },
}

impl Energies {
    pub fn len(&self) -> usize {
        match self {
            Energies::Values { values } => values.len(),
            Energies::Linspace { count, .. } => *count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct OscConfig {
    pub theta12: f64,
    pub theta13: f64,
    pub theta23: f64,
    pub delta_cp: f64,
    pub dm2_21: f64,
    pub dm2_31: f64,
    pub antineutrino: bool,
}

impl From<&OscConfig> for lazyflow::kernels::OscParams {
    fn from(c: &OscConfig) -> Self {
        lazyflow::kernels::OscParams {
            theta12: c.theta12,
            theta13: c.theta13,
            theta23: c.theta23,
            delta_cp: c.delta_cp,
            dm2_21: c.dm2_21,
            dm2_31: c.dm2_31,
            antineutrino: c.antineutrino,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct Placement {
    /// Device for every device-capable, non-source node; replaces the builtin choice.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    /// Node name, or a prefix ending in `*`, to device.
    pub nodes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Simulator {
    pub devices: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arena_capacity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk_size: Option<NonZeroUsize>,
    pub latency_ns: f64,
    pub bytes_per_ns: f64,
    pub kernel_launch_ns: f64,
    pub device_elements_per_ns: f64,
    pub host_ns_per_element: f64,
}

impl Simulator {
    pub fn cost_model(&self) -> CostModel {
        CostModel {
            latency_ns: self.latency_ns,
            bytes_per_ns: self.bytes_per_ns,
            kernel_launch_ns: self.kernel_launch_ns,
            device_elements_per_ns: self.device_elements_per_ns,
            host_ns_per_element: self.host_ns_per_element,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Recovery {
    #[default]
    Abort,
    Fallback,
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct FailureConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at_kernel: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub recovery: Recovery,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Json,
    Text,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Text => "text",
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct ReportOptions {
    pub format: ReportFormat,
    /// Include monotonic wall-clock times. Off by default so reports stay byte-stable.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RunConfig {
    pub graph: GraphConfig,
    #[serde(serialize_with = "ser_precision")]
    pub precision: Precision,
    pub device_enabled: bool,
    pub iterations: u32,
    pub seed: u64,
    pub vary: Vec<String>,
    pub baselines: Vec<f64>,
    pub energies: Energies,
    pub osc_params: OscConfig,
    pub placement: Placement,
    pub simulator: Simulator,
    pub failure: FailureConfig,
    pub report: ReportOptions,
}

fn ser_precision<S: serde::Serializer>(p: &Precision, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(p.name())
}

pub fn parse_precision(s: &str) -> Option<Precision> {
    match s {
        "f32" => Some(Precision::F32),
        "f64" => Some(Precision::F64),
        _ => None,
    }
}

/// `host` or `simN`.
pub fn parse_device(s: &str) -> Option<DeviceSpec> {
    if s == "host" {
        return Some(DeviceSpec::Host);
    }
    s.strip_prefix("sim")?.parse().ok().map(DeviceSpec::Sim)
}

fn bad(field: &str, message: impl Into<String>) -> ValidationError {
    ValidationError::new(field, message)
}

fn positive(field: &str, v: i64) -> Result<usize, ValidationError> {
    if v < 1 {
        return Err(bad(field, format!("must be at least 1, got {v}")));
    }
    usize::try_from(v).map_err(|_| bad(field, "too large"))
}

fn finite_positive(field: &str, v: f64) -> Result<f64, ValidationError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(bad(field, format!("must be a positive number, got {v}")));
    }
    Ok(v)
}

fn flavor(field: &str, s: Option<String>) -> Result<String, ValidationError> {
    let s = s.unwrap_or_else(|| "e".into());
    Flavor::parse(&s).ok_or_else(|| bad(field, format!("unknown flavor `{s}` (e, mu or tau)")))?;
    Ok(s)
}

fn resolve_graph(raw: Option<RawGraph>) -> Result<GraphConfig, ValidationError> {
    let raw = raw.ok_or_else(|| bad("graph", "missing [graph] section"))?;
    let custom = !raw.nodes.is_empty() || !raw.edges.is_empty() || !raw.outputs.is_empty();
    match (raw.builtin.as_deref(), custom) {
        (Some(_), true) => Err(bad("graph", "give either `builtin` or `nodes`/`edges`, not both")),
        (Some("oscprob"), false) => Ok(GraphConfig::Oscprob {
            alpha: flavor("graph.alpha", raw.alpha)?,
            beta: flavor("graph.beta", raw.beta)?,
            weights: raw.weights.unwrap_or_default(),
        }),
        (Some("chain"), false) => Ok(GraphConfig::Chain {
            length: positive("graph.length", raw.length.unwrap_or(3))?,
            factor: raw.factor.unwrap_or(2.0),
        }),
        (Some(other), false) => Err(bad(
            "graph.builtin",
            format!("unknown builtin `{other}` (oscprob or chain)"),
        )),
        (None, true) => {
            if raw.nodes.is_empty() {
                return Err(bad("graph.nodes", "a custom graph needs at least one node"));
            }
            Ok(GraphConfig::Custom {
                nodes: raw.nodes,
                edges: raw.edges,
                outputs: raw.outputs,
            })
        }
        (None, false) => Err(bad("graph", "name a `builtin` or list `nodes`")),
    }
}

fn resolve_energies(raw: Option<RawEnergies>) -> Result<Energies, ValidationError> {
    let Some(raw) = raw else {
        return Ok(Energies::Linspace {
            min: 1.0,
            max: 10.0,
            count: 10_000,
        });
    };
    let linspace = raw.min.is_some() || raw.max.is_some() || raw.count.is_some();
    match (raw.values, linspace) {
        (Some(_), true) => Err(bad("energies", "give either `values` or `min`/`max`/`count`")),
        (Some(values), false) => Ok(Energies::Values { values }),
        (None, _) => {
            let count = positive("energies.count", raw.count.unwrap_or(10_000))?;
            Ok(Energies::Linspace {
                min: raw.min.unwrap_or(1.0),
                max: raw.max.unwrap_or(10.0),
                count,
            })
        }
    }
}

fn resolve_osc(raw: Option<RawOsc>) -> OscConfig {
    let d = lazyflow::kernels::OscParams::default();
    let r = raw.unwrap_or_default();
    OscConfig {
        theta12: r.theta12.unwrap_or(d.theta12),
        theta13: r.theta13.unwrap_or(d.theta13),
        theta23: r.theta23.unwrap_or(d.theta23),
        delta_cp: r.delta_cp.unwrap_or(d.delta_cp),
        dm2_21: r.dm2_21.unwrap_or(d.dm2_21),
        dm2_31: r.dm2_31.unwrap_or(d.dm2_31),
        antineutrino: r.antineutrino.unwrap_or(d.antineutrino),
    }
}

fn resolve_simulator(raw: Option<RawSimulator>) -> Result<Simulator, ValidationError> {
    let r = raw.unwrap_or_default();
    let d = CostModel::default();
    let devices = match r.devices {
        None => 1,
        Some(n) if (1..=255).contains(&n) => n as u8,
        Some(n) => return Err(bad("simulator.devices", format!("must be in 1..=255, got {n}"))),
    };
    let arena_capacity = r
        .arena_capacity
        .map(|v| positive("simulator.arena_capacity", v))
        .transpose()?;
    let chunk_size = r
        .chunk_size
        .map(|v| positive("simulator.chunk_size", v).map(|n| NonZeroUsize::new(n).expect("checked")))
        .transpose()?;
    let latency_ns = r.latency_ns.unwrap_or(d.latency_ns);
    if !(latency_ns.is_finite() && latency_ns >= 0.0) {
        return Err(bad("simulator.latency_ns", "must be a non-negative number"));
    }
    let host_ns_per_element = r.host_ns_per_element.unwrap_or(d.host_ns_per_element);
    if !(host_ns_per_element.is_finite() && host_ns_per_element >= 0.0) {
        return Err(bad("simulator.host_ns_per_element", "must be a non-negative number"));
    }
    let kernel_launch_ns = r.kernel_launch_ns.unwrap_or(d.kernel_launch_ns);
    if !(kernel_launch_ns.is_finite() && kernel_launch_ns >= 0.0) {
        return Err(bad("simulator.kernel_launch_ns", "must be a non-negative number"));
    }
    Ok(Simulator {
        devices,
        arena_capacity,
        chunk_size,
        latency_ns,
        bytes_per_ns: finite_positive("simulator.bytes_per_ns", r.bytes_per_ns.unwrap_or(d.bytes_per_ns))?,
        kernel_launch_ns,
        device_elements_per_ns: finite_positive(
            "simulator.device_elements_per_ns",
            r.device_elements_per_ns.unwrap_or(d.device_elements_per_ns),
        )?,
        host_ns_per_element,
    })
}

fn resolve_failure(raw: Option<RawFailure>) -> Result<FailureConfig, ValidationError> {
    let r = raw.unwrap_or_default();
    let recovery = match r.recovery.as_deref() {
        None | Some("abort") => Recovery::Abort,
        Some("fallback") => Recovery::Fallback,
        Some(other) => {
            return Err(bad(
                "failure.recovery",
                format!("unknown policy `{other}` (abort or fallback)"),
            ))
        }
    };
    Ok(FailureConfig {
        at_kernel: r
            .at_kernel
            .map(|n| positive("failure.at_kernel", n).map(|n| n as u64))
            .transpose()?,
        probability: r.probability,
        seed: r.seed,
        recovery,
        checkpoint_every: r
            .checkpoint_every
            .map(|n| positive("failure.checkpoint_every", n))
            .transpose()?,
    })
}

fn resolve_report(raw: Option<RawReport>) -> Result<ReportOptions, ValidationError> {
    let r = raw.unwrap_or_default();
    let format = match r.format.as_deref() {
        None | Some("json") => ReportFormat::Json,
        Some("text") => ReportFormat::Text,
        Some(other) => return Err(bad("report.format", format!("unknown format `{other}` (json or text)"))),
    };
    Ok(ReportOptions {
        format,
        wall_clock: r.wall_clock.unwrap_or(false),
    })
}

impl RunConfig {
    /// Checks the cross-field invariants. Called by [`parse_config`] and again
    /// after command-line overrides.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.iterations == 0 {
            return Err(bad("iterations", "must be at least 1"));
        }
        match &self.energies {
            Energies::Values { values } => {
                if values.is_empty() {
                    return Err(bad("energies.values", "need at least one energy"));
                }
                if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                    return Err(bad(
                        "energies.values",
                        format!("energies must be positive MeV, got {v}"),
                    ));
                }
            }
            Energies::Linspace { min, max, count } => {
                if *count == 0 {
                    return Err(bad("energies.count", "must be at least 1"));
                }
                if !(min.is_finite() && *min > 0.0) {
                    return Err(bad("energies.min", format!("must be positive MeV, got {min}")));
                }
                if !(max.is_finite() && max >= min) {
                    return Err(bad("energies.max", format!("must be at least min ({min}), got {max}")));
                }
            }
        }
        if let GraphConfig::Oscprob { weights, .. } = &self.graph {
            if self.baselines.is_empty() {
                return Err(bad("baselines", "the oscprob graph needs at least one baseline"));
            }
            if !weights.is_empty() && weights.len() != self.baselines.len() {
                return Err(bad(
                    "graph.weights",
                    format!("{} weights for {} baselines", weights.len(), self.baselines.len()),
                ));
            }
        }
        if let Some(b) = self.baselines.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(bad("baselines", format!("baselines must be non-negative km, got {b}")));
        }
        lazyflow::kernels::OscParams::from(&self.osc_params)
            .validate()
            .map_err(|e| bad("osc_params", e.to_string()))?;
        let check_device = |field: &str, s: &str| -> Result<(), ValidationError> {
            match parse_device(s) {
                Some(DeviceSpec::Sim(n)) if n >= self.simulator.devices => Err(bad(
                    field,
                    format!("`{s}` but only {} simulated device(s)", self.simulator.devices),
                )),
                Some(_) => Ok(()),
                None => Err(bad(field, format!("unknown device `{s}` (host or simN)"))),
            }
        };
        if let Some(d) = &self.placement.default {
            check_device("placement.default", d)?;
        }
        for (name, d) in &self.placement.nodes {
            check_device(&format!("placement.nodes.{name}"), d)?;
        }
        if let GraphConfig::Custom { nodes, .. } = &self.graph {
            for n in nodes {
                if let Some(d) = &n.device {
                    check_device(&format!("graph.nodes.{}.device", n.name), d)?;
                }
            }
        }
        let f = &self.failure;
        if f.at_kernel.is_some() && f.probability.is_some() {
            return Err(bad("failure", "`at_kernel` and `probability` are exclusive"));
        }
        if let Some(p) = f.probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(bad("failure.probability", format!("must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Parses and validates a TOML run configuration, applying defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        ParseError {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let precision = match raw.precision.as_deref() {
        None => Precision::F64,
        Some(s) => {
            parse_precision(s).ok_or_else(|| bad("precision", format!("unknown precision `{s}` (f32 or f64)")))?
        }
    };
    let iterations = match raw.iterations {
        None => 1,
        Some(n) if n < 1 => return Err(bad("iterations", format!("must be at least 1, got {n}")).into()),
        Some(n) => u32::try_from(n).map_err(|_| bad("iterations", "too large"))?,
    };
    let placement = raw.placement.unwrap_or_default();
    let cfg = RunConfig {
        graph: resolve_graph(raw.graph)?,
        precision,
        device_enabled: raw.device_enabled.unwrap_or(true),
        iterations,
        seed: raw.seed.unwrap_or(0),
        vary: raw.vary.unwrap_or_default(),
        baselines: raw.baselines.unwrap_or_default(),
        energies: resolve_energies(raw.energies)?,
        osc_params: resolve_osc(raw.osc_params),
        placement: Placement {
            default: placement.default,
            nodes: placement.nodes,
        },
        simulator: resolve_simulator(raw.simulator)?,
        failure: resolve_failure(raw.failure)?,
        report: resolve_report(raw.report)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text)
}
