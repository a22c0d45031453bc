#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::num::NonZeroUsize;

use lazyflow::kernels::elementwise;
use lazyflow::kernels::{add_oscprob_chain, oscprob_full, Baseline, EnergyVector, Flavor, OscChain, OscParams};
use lazyflow::{ArenaConfig, DeviceSpec, ExecutableGraph, FailurePolicy, Graph, NodeId, RecoveryPolicy};
use proptest::prelude::*;

/// Node `i` reads from the listed earlier nodes; an empty list makes it a source.
#[derive(Clone, Debug)]
struct DagSpec {
    inputs: Vec<Vec<usize>>,
    on_device: Vec<bool>,
}

fn dag_strategy() -> impl Strategy<Value = DagSpec> {
    (2usize..9)
        .prop_flat_map(|n| {
            let inputs = (0..n)
                .map(|i| {
                    if i == 0 {
                        Just(Vec::new()).boxed()
                    } else {
                        prop::collection::btree_set(0..i, 0..=i.min(3))
                            .prop_map(|s| s.into_iter().collect::<Vec<_>>())
                            .boxed()
                    }
                })
                .collect::<Vec<_>>();
            (inputs, prop::collection::vec(any::<bool>(), n))
        })
        .prop_map(|(inputs, on_device)| DagSpec { inputs, on_device })
}

fn build_dag(spec: &DagSpec) -> ExecutableGraph<f64> {
    let mut g = Graph::<f64>::default();
    let mut ids = Vec::new();
    for (i, inputs) in spec.inputs.iter().enumerate() {
        let id = if inputs.is_empty() {
            let data = (0..5).map(|k| (i * 10 + k) as f64).collect();
            g.add_node(elementwise::constant(&format!("n{i}"), data)).unwrap()
        } else {
            let id = g.add_node(elementwise::add(&format!("n{i}"), inputs.len())).unwrap();
            for (port, &src) in inputs.iter().enumerate() {
                g.bind(ids[src], id.input(port)).unwrap();
            }
            if spec.on_device[i] {
                g.set_target_device(id, DeviceSpec::Sim(0)).unwrap();
            }
            id
        };
        ids.push(id.output(0));
    }
    g.finalize().unwrap()
}

fn ancestors(spec: &DagSpec, node: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut stack = vec![node];
    while let Some(n) = stack.pop() {
        if out.insert(n) {
            stack.extend(spec.inputs[n].iter().copied());
        }
    }
    out
}

/// Plain host recomputation of the DAG for comparison.
fn reference_values(spec: &DagSpec) -> Vec<Vec<f64>> {
    let mut values: Vec<Vec<f64>> = Vec::new();
    for (i, inputs) in spec.inputs.iter().enumerate() {
        let v = if inputs.is_empty() {
            (0..5).map(|k| (i * 10 + k) as f64).collect()
        } else {
            let mut acc = values[inputs[0]].clone();
            for &src in &inputs[1..] {
                for (a, b) in acc.iter_mut().zip(&values[src]) {
                    *a += b;
                }
            }
            acc
        };
        values.push(v);
    }
    values
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn evaluation_runs_exactly_the_tainted_ancestors(
        spec in dag_strategy(),
        taints in prop::collection::vec(0usize..8, 0..4),
        request in 0usize..8,
    ) {
        let n = spec.inputs.len();
        let mut exec = build_dag(&spec);
        let last = NodeId::from_index(n - 1);
        exec.evaluate(last.output(0)).unwrap();
        let expected_values = reference_values(&spec);

        for t in taints.iter().filter(|&&t| t < n) {
            exec.taint(NodeId::from_index(*t)).unwrap();
        }
        let request = request % n;
        let before: Vec<bool> = (0..n).map(|i| exec.is_tainted(NodeId::from_index(i)).unwrap()).collect();
        let closure = ancestors(&spec, request);
        let eval = exec.evaluate(NodeId::from_index(request).output(0)).unwrap();
        prop_assert_eq!(eval.data, expected_values[request].as_slice());
        let ran: BTreeSet<usize> = eval.stats.nodes_evaluated.iter().map(|(id, _)| id.index()).collect();
        let expected: BTreeSet<usize> = closure.iter().copied().filter(|&i| before[i]).collect();
        prop_assert_eq!(&ran, &expected);
        prop_assert_eq!(eval.stats.nodes_evaluated.len(), expected.len());
        let (host, device) = eval.stats.nodes_evaluated.iter().fold((0, 0), |(h, d), (_, dev)| {
            if dev.is_host() { (h + 1, d) } else { (h, d + 1) }
        });
        prop_assert_eq!((eval.stats.kernels_host, eval.stats.kernels_device), (host, device));
        for i in 0..n {
            let now = exec.is_tainted(NodeId::from_index(i)).unwrap();
            if closure.contains(&i) {
                prop_assert!(!now);
            } else {
                prop_assert_eq!(now, before[i]);
            }
        }
        let again = exec.evaluate(NodeId::from_index(request).output(0)).unwrap();
        prop_assert_eq!(again.stats.kernels(), 0);
        prop_assert_eq!(again.stats.transfers.total_count(), 0);
    }

    #[test]
    fn placement_never_changes_results(spec in dag_strategy()) {
        let n = spec.inputs.len();
        let host_only = DagSpec { on_device: vec![false; n], ..spec.clone() };
        let mut a = build_dag(&spec);
        let mut b = build_dag(&host_only);
        for i in 0..n {
            let out = NodeId::from_index(i).output(0);
            let x = a.evaluate(out).unwrap().data.to_vec();
            let y = b.evaluate(out).unwrap().data.to_vec();
            prop_assert_eq!(x, y);
        }
    }
}

#[test]
fn fan_out_inputs_alias_the_source() {
    let mut g = Graph::<f64>::default();
    let src = g.add_node(elementwise::constant("src", vec![3.0, 1.0, 4.0])).unwrap();
    let a = g.add_node(elementwise::identity("a")).unwrap();
    let b = g.add_node(elementwise::identity("b")).unwrap();
    g.bind(src.output(0), a.input(0)).unwrap();
    g.bind(src.output(0), b.input(0)).unwrap();
    let mut exec = g.finalize().unwrap();
    assert_eq!(exec.inputs_of(a).unwrap(), &[src.output(0)]);
    assert_eq!(exec.memory().buffer_count(), 3, "inputs own no storage");
    let x = exec.evaluate(a.output(0)).unwrap().data.to_vec();
    let y = exec.evaluate(b.output(0)).unwrap().data.to_vec();
    let s = exec.evaluate(src.output(0)).unwrap().data.to_vec();
    assert_eq!(x, s);
    assert_eq!(y, s);
    assert_eq!(exec.counters(src).unwrap().total(), 1);
}

/// Two sources feeding a small tree; reading the middle leaves the top alone.
#[test]
fn reading_an_intermediate_leaves_descendants_untouched() {
    let mut g = Graph::<f64>::default();
    let s1 = g.add_node(elementwise::constant("s1", vec![1.0; 4])).unwrap();
    let s2 = g.add_node(elementwise::constant("s2", vec![2.0; 4])).unwrap();
    let mid = g.add_node(elementwise::product("mid", 2)).unwrap();
    let side = g.add_node(elementwise::identity("side")).unwrap();
    let top = g.add_node(elementwise::add("top", 2)).unwrap();
    g.bind(s1.output(0), mid.input(0)).unwrap();
    g.bind(s2.output(0), mid.input(1)).unwrap();
    g.bind(s2.output(0), side.input(0)).unwrap();
    g.bind(mid.output(0), top.input(0)).unwrap();
    g.bind(side.output(0), top.input(1)).unwrap();
    let mut exec = g.finalize().unwrap();
    let eval = exec.evaluate(mid.output(0)).unwrap();
    assert_eq!(eval.data, &[2.0; 4]);
    assert_eq!(
        eval.stats.nodes_evaluated.iter().map(|(n, _)| *n).collect::<Vec<_>>(),
        vec![s1, s2, mid],
        "inputs visited in port order"
    );
    for n in [side, top] {
        assert_eq!(exec.counters(n).unwrap().total(), 0);
        assert!(exec.is_tainted(n).unwrap());
    }
    assert_eq!(exec.evaluate(top.output(0)).unwrap().data, &[4.0; 4]);
    assert_eq!(exec.counters(mid).unwrap().total(), 1);
}

struct OscFixture {
    exec: ExecutableGraph<f64>,
    energy: NodeId,
    chains: Vec<OscChain>,
    merge: NodeId,
}

const BASELINES: [f64; 3] = [52.5, 52.8, 215.0];

fn osc_graph(device: bool, config: ArenaConfig, energies: usize) -> OscFixture {
    let mut g = Graph::<f64>::new(config);
    let energy = g
        .add_node(elementwise::linspace("energy", 1.0, 10.0, energies))
        .unwrap();
    let params = OscParams {
        antineutrino: true,
        delta_cp: 1.1,
        ..OscParams::default()
    };
    let mut chains = Vec::new();
    for (k, &l) in BASELINES.iter().enumerate() {
        let chain = add_oscprob_chain(
            &mut g,
            energy.output(0),
            &format!("osc{k}"),
            Flavor::E,
            Flavor::E,
            &params,
            Baseline::new(l).unwrap(),
        )
        .unwrap();
        if device {
            for node in [chain.phases[0], chain.phases[1], chain.phases[2], chain.assembly] {
                g.set_target_device(node, DeviceSpec::Sim(0)).unwrap();
            }
        }
        chains.push(chain);
    }
    let merge = g.add_node(elementwise::weighted_sum("merge", chains.len())).unwrap();
    for (k, chain) in chains.iter().enumerate() {
        g.bind(chain.output(), merge.input(k)).unwrap();
        let w = g.make_variable(&format!("merge.w{k}"), 1.0 / 3.0).unwrap();
        g.attach_variable(merge, w).unwrap();
    }
    OscFixture {
        exec: g.finalize().unwrap(),
        energy,
        chains,
        merge,
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn oscillation_graph_matches_direct_formula() {
    let mut f = osc_graph(true, ArenaConfig::default(), 200);
    let energies = EnergyVector::new(f.exec.evaluate(f.energy.output(0)).unwrap().data.to_vec()).unwrap();
    let params = OscParams {
        antineutrino: true,
        delta_cp: 1.1,
        ..OscParams::default()
    };
    for (chain, &l) in f.chains.clone().iter().zip(&BASELINES) {
        let graph = f.exec.evaluate(chain.output()).unwrap().data.to_vec();
        let direct = oscprob_full(Flavor::E, Flavor::E, &params, Baseline::new(l).unwrap(), &energies);
        assert_eq!(bits(&graph), bits(&direct));
    }
}

#[test]
fn device_and_host_placements_agree_bitwise() {
    let mut host = osc_graph(false, ArenaConfig::default(), 500);
    let mut dev = osc_graph(true, ArenaConfig::default(), 500);
    let h = host.exec.evaluate(host.merge.output(0)).unwrap().data.to_vec();
    let d = dev.exec.evaluate(dev.merge.output(0)).unwrap();
    assert_eq!(bits(&h), bits(d.data));
    assert!(d.stats.kernels_device > 0);
}

#[test]
fn energy_is_computed_once_and_perturbations_stay_local() {
    let mut f = osc_graph(true, ArenaConfig::default(), 64);
    let out = f.merge.output(0);
    let first = f.exec.evaluate(out).unwrap();
    assert_eq!(
        first.stats.transfers.h2d_count,
        1 + 3,
        "energy once, then each chain's weights"
    );
    assert_eq!(f.exec.counters(f.energy).unwrap().total(), 1);

    let target = &f.chains[1];
    f.exec.set_variable(target.variables.baseline, 60.0).unwrap();
    let before: Vec<u64> = (0..f.exec.node_count())
        .map(|i| f.exec.counters(NodeId::from_index(i)).unwrap().total())
        .collect();
    let eval = f.exec.evaluate(out).unwrap();
    let mut ran: Vec<NodeId> = eval.stats.nodes_evaluated.iter().map(|(n, _)| *n).collect();
    ran.sort();
    let mut expected = vec![
        target.phases[0],
        target.phases[1],
        target.phases[2],
        target.assembly,
        f.merge,
    ];
    expected.sort();
    assert_eq!(ran, expected);
    for i in 0..f.exec.node_count() {
        let id = NodeId::from_index(i);
        let delta = f.exec.counters(id).unwrap().total() - before[i];
        assert_eq!(delta, u64::from(expected.contains(&id)), "{id}");
    }
}

#[test]
fn chunk_size_does_not_change_bits() {
    let run = |chunk: Option<usize>| {
        let config = ArenaConfig {
            chunk_size: chunk.and_then(NonZeroUsize::new),
            ..ArenaConfig::default()
        };
        let mut f = osc_graph(true, config, 1001);
        bits(f.exec.evaluate(f.merge.output(0)).unwrap().data)
    };
    let whole = run(None);
    assert_eq!(run(Some(1)), whole);
    assert_eq!(run(Some(7)), whole);
}

#[test]
fn random_faults_fall_back_to_identical_results() {
    let mut reference = osc_graph(false, ArenaConfig::default(), 300);
    let expected = bits(reference.exec.evaluate(reference.merge.output(0)).unwrap().data);
    for seed in 0..10 {
        let config = ArenaConfig {
            failure: FailurePolicy::FailWithProbability { p: 0.2, seed },
            ..ArenaConfig::default()
        };
        let mut f = osc_graph(true, config, 300);
        f.exec.set_recovery_policy(RecoveryPolicy::FallbackToHost);
        f.exec.set_checkpoint_policy(Some(2));
        let got = bits(f.exec.evaluate_with_recovery(f.merge.output(0)).unwrap().data);
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn identical_builds_are_deterministic() {
    let run = || {
        let mut f = osc_graph(true, ArenaConfig::default(), 128);
        let eval = f.exec.evaluate(f.merge.output(0)).unwrap();
        (
            eval.stats.nodes_evaluated.clone(),
            bits(eval.data),
            eval.stats.transfers.clone(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn single_precision_graph_runs_on_both_sides() {
    let build = |device: bool| {
        let mut g = Graph::<f32>::default();
        let e = g.add_node(elementwise::linspace("energy", 1.0, 10.0, 50)).unwrap();
        let chain = add_oscprob_chain(
            &mut g,
            e.output(0),
            "osc",
            Flavor::Mu,
            Flavor::E,
            &OscParams::default(),
            Baseline::new(295.0).unwrap(),
        )
        .unwrap();
        if device {
            g.set_target_device(chain.assembly, DeviceSpec::Sim(0)).unwrap();
        }
        let mut exec = g.finalize().unwrap();
        exec.evaluate(chain.output()).unwrap().data.to_vec()
    };
    assert_eq!(build(false), build(true));
}
