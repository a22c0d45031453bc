//! Turns a [`RunConfig`] into an executable graph.

use std::collections::{BTreeMap, BTreeSet};

use lazyflow::kernels::{add_oscprob_chain, elementwise, Baseline, Flavor, OscChain, OscParams};
use lazyflow::{
    ArenaConfig, DeviceKind, DeviceSpec, ExecutableGraph, FailurePolicy, Graph, GraphError, NodeId, PortRef,
    RecoveryPolicy, Scalar, TransformationSpec,
};
use thiserror::Error;

use crate::config::{parse_device, Energies, GraphConfig, NodeDecl, Recovery, RunConfig, ValidationError};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A finalized graph plus the handles the driver needs.
pub struct BuiltGraph<T> {
    pub exec: ExecutableGraph<T>,
    /// Outputs read every iteration, in report order.
    pub outputs: Vec<(String, PortRef)>,
    /// Oscillation subchains, one per baseline; empty for other graphs.
    pub chains: Vec<OscChain>,
    pub energy: Option<NodeId>,
    pub merge: Option<NodeId>,
}

impl<T: Scalar> BuiltGraph<T> {
    pub fn node_name(&self, id: NodeId) -> String {
        self.exec
            .spec(id)
            .map(|s| s.name.clone())
            .unwrap_or_else(|_| id.to_string())
    }
}

pub fn arena_config(cfg: &RunConfig) -> ArenaConfig {
    let sim = &cfg.simulator;
    let failure = match (cfg.failure.at_kernel, cfg.failure.probability) {
        (Some(n), _) => FailurePolicy::FailAtKernel(n),
        (None, Some(p)) => FailurePolicy::FailWithProbability {
            p,
            seed: cfg.failure.seed.unwrap_or(cfg.seed),
        },
        (None, None) => FailurePolicy::None,
    };
    ArenaConfig {
        devices: sim.devices,
        capacity_bytes: sim.arena_capacity,
        chunk_size: sim.chunk_size,
        cost: sim.cost_model(),
        failure,
    }
}

fn new_graph<T: Scalar>(cfg: &RunConfig) -> Graph<T> {
    let mut g = Graph::new(arena_config(cfg));
    g.set_recovery_policy(match cfg.failure.recovery {
        Recovery::Abort => RecoveryPolicy::Abort,
        Recovery::Fallback => RecoveryPolicy::FallbackToHost,
    });
    g.set_checkpoint_policy(cfg.failure.checkpoint_every);
    g
}

fn energy_spec<T: Scalar>(name: &str, energies: &Energies) -> TransformationSpec<T> {
    match energies {
        Energies::Linspace { min, max, count } => elementwise::linspace(name, *min, *max, *count),
        Energies::Values { values } => elementwise::constant(name, values.iter().map(|&v| T::of(v)).collect()),
    }
}

fn spec_name<T: Scalar>(g: &Graph<T>, id: NodeId) -> String {
    g.spec(id).map(|s| s.name.clone()).unwrap_or_default()
}

/// Assigns target devices. `preferred` gives the graph's own choice per node;
/// `[placement]` then overrides it. With the device disabled everything stays on the host.
fn apply_placement<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &RunConfig,
    device_enabled: bool,
    preferred: impl Fn(NodeId, &TransformationSpec<T>) -> DeviceSpec,
) -> Result<(), BuildError> {
    if !device_enabled {
        return Ok(());
    }
    let ids: Vec<NodeId> = (0..g.node_count()).map(NodeId::from_index).collect();
    let names: Vec<String> = ids.iter().map(|&id| spec_name(g, id)).collect();
    for key in cfg.placement.nodes.keys() {
        let hit = match key.strip_suffix('*') {
            Some(prefix) => names.iter().any(|n| n.starts_with(prefix)),
            None => names.iter().any(|n| n == key),
        };
        if !hit {
            return Err(ValidationError::new(format!("placement.nodes.{key}"), "matches no node").into());
        }
    }
    let default = cfg.placement.default.as_deref().and_then(parse_device);
    for (&id, name) in ids.iter().zip(&names) {
        let spec = g.spec(id)?;
        let mut device = preferred(id, spec);
        if let Some(d) = default {
            if !spec.inputs.is_empty() && spec.has_kernel(DeviceKind::Sim) {
                device = d;
            }
        }
        if let Some(d) = cfg.placement.nodes.get(name) {
            device = parse_device(d).expect("validated");
        } else if let Some((_, d)) = cfg
            .placement
            .nodes
            .iter()
            .filter_map(|(k, d)| {
                k.strip_suffix('*')
                    .filter(|p| name.starts_with(p))
                    .map(|p| (p.len(), d))
            })
            .max_by_key(|(len, _)| *len)
        {
            device = parse_device(d).expect("validated");
        }
        if device != DeviceSpec::Host {
            g.set_target_device(id, device)?;
        }
    }
    Ok(())
}

/// Device-capable nodes with inputs go to the first simulated device.
fn compute_on_device<T: Scalar>(spec: &TransformationSpec<T>) -> DeviceSpec {
    if !spec.inputs.is_empty() && spec.has_kernel(DeviceKind::Sim) {
        DeviceSpec::Sim(0)
    } else {
        DeviceSpec::Host
    }
}

fn check_vary<T: Scalar>(exec: &ExecutableGraph<T>, vary: &[String]) -> Result<(), ValidationError> {
    for name in vary {
        if exec.variable(name).is_none() {
            let known: Vec<&str> = exec.variable_names().map(|(n, _)| n).collect();
            return Err(ValidationError::new(
                "vary",
                format!("no variable named `{name}`; known: {}", known.join(", ")),
            ));
        }
    }
    Ok(())
}

/// One energy node feeding one oscillation subchain per baseline, merged
/// by a weighted sum with variables `merge.w{k}`.
pub fn build_builtin_oscprob<T: Scalar>(cfg: &RunConfig, device_enabled: bool) -> Result<BuiltGraph<T>, BuildError> {
    let GraphConfig::Oscprob { alpha, beta, weights } = &cfg.graph else {
        return Err(ValidationError::new("graph.builtin", "not the oscprob graph").into());
    };
    let alpha = Flavor::parse(alpha).expect("validated");
    let beta = Flavor::parse(beta).expect("validated");
    let params = OscParams::from(&cfg.osc_params);
    let m = cfg.baselines.len();
    let mut g = new_graph::<T>(cfg);
    let energy = g.add_node(energy_spec("energy", &cfg.energies))?;
    let mut chains = Vec::with_capacity(m);
    for (k, &km) in cfg.baselines.iter().enumerate() {
        let baseline = Baseline::new(km).map_err(|e| ValidationError::new("baselines", e.to_string()))?;
        chains.push(add_oscprob_chain(
            &mut g,
            energy.output(0),
            &format!("osc{k}"),
            alpha,
            beta,
            &params,
            baseline,
        )?);
    }
    let merge = g.add_node(elementwise::weighted_sum("merge", m))?;
    for (k, chain) in chains.iter().enumerate() {
        let w = weights.get(k).copied().unwrap_or(1.0 / m as f64);
        let var = g.make_variable(&format!("merge.w{k}"), w)?;
        g.attach_variable(merge, var)?;
        g.bind(chain.output(), merge.input(k))?;
    }
    apply_placement(&mut g, cfg, device_enabled, |_, spec| compute_on_device(spec))?;
    let exec = g.finalize()?;
    check_vary(&exec, &cfg.vary)?;
    Ok(BuiltGraph {
        exec,
        outputs: vec![("merge".into(), merge.output(0))],
        chains,
        energy: Some(energy),
        merge: Some(merge),
    })
}

/// Host energies → `length` device `scale` nodes → host `sink`.
pub fn build_chain<T: Scalar>(cfg: &RunConfig, device_enabled: bool) -> Result<BuiltGraph<T>, BuildError> {
    let GraphConfig::Chain { length, factor } = &cfg.graph else {
        return Err(ValidationError::new("graph.builtin", "not the chain graph").into());
    };
    let mut g = new_graph::<T>(cfg);
    let energy = g.add_node(energy_spec("energy", &cfg.energies))?;
    let mut prev = energy;
    for i in 1..=*length {
        let name = format!("t{i}");
        let node = g.add_node(elementwise::scale(&name))?;
        let k = g.make_variable(&format!("{name}.k"), *factor)?;
        g.attach_variable(node, k)?;
        g.bind(prev.output(0), node.input(0))?;
        prev = node;
    }
    let sink = g.add_node(elementwise::identity("sink"))?;
    g.bind(prev.output(0), sink.input(0))?;
    apply_placement(&mut g, cfg, device_enabled, |id, spec| {
        if id == sink {
            DeviceSpec::Host
        } else {
            compute_on_device(spec)
        }
    })?;
    let exec = g.finalize()?;
    check_vary(&exec, &cfg.vary)?;
    Ok(BuiltGraph {
        exec,
        outputs: vec![("sink".into(), sink.output(0))],
        chains: Vec::new(),
        energy: Some(energy),
        merge: None,
    })
}

/// Variable names with their initial values.
type NamedValues = Vec<(String, f64)>;

fn node_field(node: &NodeDecl, key: &str) -> String {
    format!("graph.nodes.{}.{key}", node.name)
}

fn custom_spec<T: Scalar>(
    node: &NodeDecl,
    arity: usize,
    energies: &Energies,
) -> Result<(TransformationSpec<T>, NamedValues), ValidationError> {
    let need_inputs = |min: usize| {
        if arity < min {
            Err(ValidationError::new(
                node_field(node, "op"),
                format!("`{}` needs at least {min} incoming edge(s), has {arity}", node.op),
            ))
        } else {
            Ok(())
        }
    };
    let no_inputs = || {
        if arity > 0 {
            Err(ValidationError::new(
                node_field(node, "op"),
                format!("`{}` takes no inputs", node.op),
            ))
        } else {
            Ok(())
        }
    };
    let name = node.name.as_str();
    Ok(match node.op.as_str() {
        "energies" => {
            no_inputs()?;
            (energy_spec(name, energies), vec![])
        }
        "constant" => {
            no_inputs()?;
            let values = node
                .values
                .as_ref()
                .filter(|v| !v.is_empty())
                .ok_or_else(|| ValidationError::new(node_field(node, "values"), "constant needs values"))?;
            (
                elementwise::constant(name, values.iter().map(|&v| T::of(v)).collect()),
                vec![],
            )
        }
        "identity" => {
            need_inputs(1)?;
            (elementwise::identity(name), vec![])
        }
        "scale" => {
            need_inputs(1)?;
            (
                elementwise::scale(name),
                vec![(format!("{name}.k"), node.k.unwrap_or(1.0))],
            )
        }
        "add" => {
            need_inputs(1)?;
            (elementwise::add(name, arity), vec![])
        }
        "product" => {
            need_inputs(1)?;
            (elementwise::product(name, arity), vec![])
        }
        "weighted_sum" => {
            need_inputs(1)?;
            let weights = node.weights.clone().unwrap_or_else(|| vec![1.0; arity]);
            if weights.len() != arity {
                return Err(ValidationError::new(
                    node_field(node, "weights"),
                    format!("{} weights for {arity} inputs", weights.len()),
                ));
            }
            let vars = weights
                .iter()
                .enumerate()
                .map(|(k, &w)| (format!("{name}.w{k}"), w))
                .collect();
            (elementwise::weighted_sum(name, arity), vars)
        }
        other => {
            return Err(ValidationError::new(
                node_field(node, "op"),
                format!("unknown op `{other}` (energies, constant, identity, scale, add, product, weighted_sum)"),
            ))
        }
    })
}

/// A graph spelled out as `[[graph.nodes]]` and `[[graph.edges]]`.
pub fn build_custom<T: Scalar>(cfg: &RunConfig, device_enabled: bool) -> Result<BuiltGraph<T>, BuildError> {
    let GraphConfig::Custom { nodes, edges, outputs } = &cfg.graph else {
        return Err(ValidationError::new("graph", "not a custom graph").into());
    };
    let mut index = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.name.as_str(), i).is_some() {
            return Err(ValidationError::new("graph.nodes", format!("duplicate node `{}`", n.name)).into());
        }
    }
    let mut arity = vec![0usize; nodes.len()];
    for e in edges {
        for end in [&e.from, &e.to] {
            if !index.contains_key(end.as_str()) {
                return Err(ValidationError::new("graph.edges", format!("unknown node `{end}`")).into());
            }
        }
        let to = index[e.to.as_str()];
        arity[to] = arity[to].max(e.port + 1);
    }
    let mut g = new_graph::<T>(cfg);
    let mut ids = Vec::with_capacity(nodes.len());
    for (n, &a) in nodes.iter().zip(&arity) {
        let (spec, vars) = custom_spec::<T>(n, a, &cfg.energies)?;
        let id = g.add_node(spec)?;
        for (name, value) in vars {
            let v = g.make_variable(&name, value)?;
            g.attach_variable(id, v)?;
        }
        ids.push(id);
    }
    for e in edges {
        g.bind(
            ids[index[e.from.as_str()]].output(0),
            ids[index[e.to.as_str()]].input(e.port),
        )?;
    }
    let explicit: Vec<Option<DeviceSpec>> = nodes
        .iter()
        .map(|n| n.device.as_deref().map(|d| parse_device(d).expect("validated")))
        .collect();
    apply_placement(&mut g, cfg, device_enabled, |id, _| {
        explicit[id.index()].unwrap_or(DeviceSpec::Host)
    })?;
    let exec = g.finalize()?;
    check_vary(&exec, &cfg.vary)?;
    let consumed: BTreeSet<&str> = edges.iter().map(|e| e.from.as_str()).collect();
    let names: Vec<&str> = if outputs.is_empty() {
        nodes
            .iter()
            .map(|n| n.name.as_str())
            .filter(|n| !consumed.contains(n))
            .collect()
    } else {
        outputs.iter().map(String::as_str).collect()
    };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let &i = index
            .get(name)
            .ok_or_else(|| ValidationError::new("graph.outputs", format!("unknown node `{name}`")))?;
        out.push((name.to_string(), ids[i].output(0)));
    }
    Ok(BuiltGraph {
        exec,
        outputs: out,
        chains: Vec::new(),
        energy: None,
        merge: None,
    })
}

pub fn build_graph<T: Scalar>(cfg: &RunConfig, device_enabled: bool) -> Result<BuiltGraph<T>, BuildError> {
    match cfg.graph {
        GraphConfig::Oscprob { .. } => build_builtin_oscprob(cfg, device_enabled),
        GraphConfig::Chain { .. } => build_chain(cfg, device_enabled),
        GraphConfig::Custom { .. } => build_custom(cfg, device_enabled),
    }
}
