//! Three-flavor vacuum oscillation probability.
//!
//! The probability is assembled from three ingredients that map onto
//! separate transformations: mixing weights derived from the PMNS matrix
//! (variable-dependent scalars), one phase vector per mass-splitting pair
//! and a final elementwise assembly
//!
//! ```text
//! P = δαβ − 4 Σ Re(J_ij) sin²(Δ_ij) + 2 Σ Im(J_ij) sin(2Δ_ij),
//! J_ij = V*αi Vβi Vαj V*βj,   Δ_ij = 1.26693268 Δm²_ij[eV²] L[km] / E[GeV]
//! ```
//!
//! with the pairs visited in the order (2,1), (3,1), (3,2).

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use thiserror::Error;

use super::elementwise::per_element;
use crate::graph::{Graph, GraphError, NodeId, PortRef, ShapeIssue, ShapeRule, TransformationSpec, VariableRef};
use crate::memory::{DeviceKind, KernelArgs, KernelFn, Shape};
use crate::scalar::Scalar;

/// Phase constant for Δm² in eV², L in km and E in GeV.
pub const PHASE_CONSTANT: f64 = 1.26693268;

/// Length of the packed mixing-weight vector: `[δαβ, re21, re31, re32, im21, im31, im32]`.
pub const WEIGHT_LEN: usize = 7;

pub type PmnsMatrix<T> = [[Complex<T>; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OscError {
    #[error("mixing angle {name} = {value} outside [0, π/2]")]
    AngleOutOfRange { name: &'static str, value: f64 },
    #[error("CP phase {0} outside [0, 2π)")]
    PhaseOutOfRange(f64),
    #[error("baseline {0} km is negative")]
    NegativeBaseline(f64),
    #[error("energy vector is empty")]
    EmptyEnergies,
    #[error("energy {value} MeV at index {index} is not strictly positive")]
    NonPositiveEnergy { index: usize, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Flavor {
    E,
    Mu,
    Tau,
}

impl Flavor {
    pub const ALL: [Flavor; 3] = [Flavor::E, Flavor::Mu, Flavor::Tau];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Flavor::E => "e",
            Flavor::Mu => "mu",
            Flavor::Tau => "tau",
        }
    }

    pub fn parse(s: &str) -> Option<Flavor> {
        match s {
            "e" => Some(Flavor::E),
            "mu" => Some(Flavor::Mu),
            "tau" => Some(Flavor::Tau),
            _ => None,
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Oscillation parameters. Angles and phase in radians, splittings in eV².
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OscParams {
    pub theta12: f64,
    pub theta13: f64,
    pub theta23: f64,
    pub delta_cp: f64,
    pub dm2_21: f64,
    /// Signed; a negative value selects the inverted ordering.
    pub dm2_31: f64,
    pub antineutrino: bool,
}

impl Default for OscParams {
    // measured θ23, not π/4
    #[allow(clippy::approx_constant)]
    fn default() -> Self {
        OscParams {
            theta12: 0.5838,
            theta13: 0.1496,
            theta23: 0.7854,
            delta_cp: 0.0,
            dm2_21: 7.53e-5,
            dm2_31: 2.52e-3,
            antineutrino: false,
        }
    }
}

impl OscParams {
    pub fn validate(&self) -> Result<(), OscError> {
        for (name, value) in [
            ("theta12", self.theta12),
            ("theta13", self.theta13),
            ("theta23", self.theta23),
        ] {
            if !(0.0..=FRAC_PI_2).contains(&value) {
                return Err(OscError::AngleOutOfRange { name, value });
            }
        }
        if !(0.0..TAU).contains(&self.delta_cp) {
            return Err(OscError::PhaseOutOfRange(self.delta_cp));
        }
        Ok(())
    }

    pub fn dm2_32(&self) -> f64 {
        self.dm2_31 - self.dm2_21
    }
}

/// Source-to-detector distance in km.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Baseline(f64);

impl Baseline {
    pub fn new(km: f64) -> Result<Self, OscError> {
        if km >= 0.0 {
            Ok(Baseline(km))
        } else {
            Err(OscError::NegativeBaseline(km))
        }
    }

    pub fn km(self) -> f64 {
        self.0
    }
}

/// Neutrino energies in MeV, nonempty and strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyVector<T>(Vec<T>);

impl<T: Scalar> EnergyVector<T> {
    pub fn new(mev: Vec<T>) -> Result<Self, OscError> {
        if mev.is_empty() {
            return Err(OscError::EmptyEnergies);
        }
        if let Some((index, value)) = mev
            .iter()
            .enumerate()
            .find(|(_, e)| e.partial_cmp(&&T::zero()) != Some(std::cmp::Ordering::Greater))
        {
            return Err(OscError::NonPositiveEnergy {
                index,
                value: value.as_f64(),
            });
        }
        Ok(EnergyVector(mev))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The mass-splitting pairs `i > j`, in summation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MassPair {
    P21,
    P31,
    P32,
}

impl MassPair {
    pub const ALL: [MassPair; 3] = [MassPair::P21, MassPair::P31, MassPair::P32];

    /// Zero-based mass indices `(i, j)`.
    pub fn indices(self) -> (usize, usize) {
        match self {
            MassPair::P21 => (1, 0),
            MassPair::P31 => (2, 0),
            MassPair::P32 => (2, 1),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MassPair::P21 => "21",
            MassPair::P31 => "31",
            MassPair::P32 => "32",
        }
    }
}

fn matmul<T: Scalar>(a: &PmnsMatrix<T>, b: &PmnsMatrix<T>) -> PmnsMatrix<T> {
    let zero = Complex::new(T::zero(), T::zero());
    let mut out = [[zero; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            *cell = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
        }
    }
    out
}

/// `R23(θ23) · U13(θ13, δ) · R12(θ12)`, conjugated for antineutrinos.
pub fn pmns_from_angles<T: Scalar>(theta12: T, theta13: T, theta23: T, delta: T, antineutrino: bool) -> PmnsMatrix<T> {
    let re = |x: T| Complex::new(x, T::zero());
    let (o, l) = (re(T::zero()), re(T::one()));
    let (s12, c12) = theta12.sin_cos();
    let (s13, c13) = theta13.sin_cos();
    let (s23, c23) = theta23.sin_cos();
    let phase = Complex::from_polar(T::one(), delta);
    let r23 = [[l, o, o], [o, re(c23), re(s23)], [o, re(-s23), re(c23)]];
    let u13 = [
        [re(c13), o, re(s13) * phase.conj()],
        [o, l, o],
        [-re(s13) * phase, o, re(c13)],
    ];
    let r12 = [[re(c12), re(s12), o], [re(-s12), re(c12), o], [o, o, l]];
    let v = matmul(&matmul(&r23, &u13), &r12);
    if antineutrino {
        v.map(|row| row.map(|z| z.conj()))
    } else {
        v
    }
}

pub fn pmns_matrix<T: Scalar>(params: &OscParams) -> PmnsMatrix<T> {
    pmns_from_angles(
        T::of(params.theta12),
        T::of(params.theta13),
        T::of(params.theta23),
        T::of(params.delta_cp),
        params.antineutrino,
    )
}

/// Coefficients multiplying the sin² and sin terms for one flavor transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixingWeights<T> {
    /// `δαβ`
    pub delta: T,
    /// `−4 Re(J_ij)` per pair
    pub re: [T; 3],
    /// `2 Im(J_ij)` per pair
    pub im: [T; 3],
}

impl<T: Scalar> MixingWeights<T> {
    pub fn from_matrix(alpha: Flavor, beta: Flavor, v: &PmnsMatrix<T>) -> Self {
        let (a, b) = (alpha.index(), beta.index());
        let mut re = [T::zero(); 3];
        let mut im = [T::zero(); 3];
        for (p, pair) in MassPair::ALL.iter().enumerate() {
            let (i, j) = pair.indices();
            let quartic = v[a][i].conj() * v[b][i] * v[a][j] * v[b][j].conj();
            re[p] = T::of(-4.0) * quartic.re;
            im[p] = T::of(2.0) * quartic.im;
        }
        MixingWeights {
            delta: if a == b { T::one() } else { T::zero() },
            re,
            im,
        }
    }

    pub fn pack(&self) -> [T; WEIGHT_LEN] {
        [
            self.delta, self.re[0], self.re[1], self.re[2], self.im[0], self.im[1], self.im[2],
        ]
    }

    pub fn unpack(packed: &[T]) -> Self {
        MixingWeights {
            delta: packed[0],
            re: [packed[1], packed[2], packed[3]],
            im: [packed[4], packed[5], packed[6]],
        }
    }
}

/// `Δ = 1.26693268 · dm2 · L / (E / 1000)` for one energy in MeV.
#[inline]
pub fn phase_at<T: Scalar>(dm2: T, baseline_km: T, energy_mev: T) -> T {
    T::of(PHASE_CONSTANT) * dm2 * baseline_km / (energy_mev / T::of(1000.0))
}

pub fn osc_phase<T: Scalar>(dm2: T, baseline: Baseline, energies: &EnergyVector<T>) -> Vec<T> {
    let l = T::of(baseline.km());
    energies.as_slice().iter().map(|&e| phase_at(dm2, l, e)).collect()
}

/// One probability from the packed weights and the three pair phases.
#[inline]
pub fn assemble_probability<T: Scalar>(w: &MixingWeights<T>, phases: [T; 3]) -> T {
    let mut p = w.delta;
    for (coef, d) in w.re.iter().zip(phases) {
        let s = d.sin();
        p = p + *coef * (s * s);
    }
    for (coef, d) in w.im.iter().zip(phases) {
        p = p + *coef * (d + d).sin();
    }
    p
}

fn pair_dm2<T: Scalar>(params: &OscParams, pair: MassPair) -> T {
    let (d21, d31) = (T::of(params.dm2_21), T::of(params.dm2_31));
    match pair {
        MassPair::P21 => d21,
        MassPair::P31 => d31,
        MassPair::P32 => d31 - d21,
    }
}

/// P(α→β) at each energy, term by term.
pub fn oscprob_full<T: Scalar>(
    alpha: Flavor,
    beta: Flavor,
    params: &OscParams,
    baseline: Baseline,
    energies: &EnergyVector<T>,
) -> Vec<T> {
    let weights = MixingWeights::from_matrix(alpha, beta, &pmns_matrix::<T>(params));
    let phases = MassPair::ALL.map(|pair| osc_phase(pair_dm2::<T>(params, pair), baseline, energies));
    (0..energies.len())
        .map(|n| assemble_probability(&weights, [phases[0][n], phases[1][n], phases[2][n]]))
        .collect()
}

/// Two-flavor survival probability `1 − sin²(2θ) sin²(Δ)`.
pub fn two_flavor_prob<T: Scalar>(theta: T, dm2: T, baseline: Baseline, energies: &EnergyVector<T>) -> Vec<T> {
    let s2 = (theta + theta).sin();
    osc_phase(dm2, baseline, energies)
        .into_iter()
        .map(|d| {
            let s = d.sin();
            T::one() - s2 * s2 * (s * s)
        })
        .collect()
}

/// Host-only transformation producing the packed mixing weights from the
/// angle variables `theta12, theta13, theta23, delta_cp`.
pub fn mixing_weights_spec<T: Scalar>(
    name: &str,
    alpha: Flavor,
    beta: Flavor,
    antineutrino: bool,
) -> TransformationSpec<T> {
    let host: KernelFn<T> = Arc::new(move |args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let v = args.vars;
        let matrix = pmns_from_angles(v[0], v[1], v[2], v[3], antineutrino);
        let packed = MixingWeights::from_matrix(alpha, beta, &matrix).pack();
        let r = args.range.clone();
        outs[0][r.clone()].copy_from_slice(&packed[r]);
    });
    TransformationSpec::new(name)
        .output("weights", ShapeRule::Constant(Shape::vector(WEIGHT_LEN)))
        .variable("theta12")
        .variable("theta13")
        .variable("theta23")
        .variable("delta_cp")
        .kernel(DeviceKind::Host, host)
}

/// Phase vector for one pair from an energy input. Variables are
/// `[dm2, L]`, or `[dm2_31, dm2_21, L]` for the derived (3,2) pair.
pub fn phase_spec<T: Scalar>(name: &str, pair: MassPair) -> TransformationSpec<T> {
    #[inline]
    fn dm2<T: Scalar>(pair: MassPair, vars: &[T]) -> (T, T) {
        match pair {
            MassPair::P32 => (vars[0] - vars[1], vars[2]),
            _ => (vars[0], vars[1]),
        }
    }
    let host: KernelFn<T> = Arc::new(move |args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let (dm2, l) = dm2(pair, args.vars);
        let r = args.range.clone();
        for (out, &e) in outs[0][r.clone()].iter_mut().zip(&args.inputs[0][r]) {
            *out = phase_at(dm2, l, e);
        }
    });
    let device = per_element(move |i, args, outs: &mut [&mut [T]]| {
        let (dm2, l) = dm2(pair, args.vars);
        outs[0][i] = phase_at(dm2, l, args.inputs[0][i]);
    });
    let spec = TransformationSpec::new(name)
        .input("energy", Some(1))
        .output("phase", ShapeRule::SameAsInput(0));
    let spec = match pair {
        MassPair::P21 => spec.variable("dm2_21"),
        MassPair::P31 => spec.variable("dm2_31"),
        MassPair::P32 => spec.variable("dm2_31").variable("dm2_21"),
    };
    spec.variable("L")
        .kernel(DeviceKind::Host, host)
        .kernel(DeviceKind::Sim, device)
}

/// Final assembly: inputs `[weights, phase21, phase31, phase32]`.
pub fn assembly_spec<T: Scalar>(name: &str) -> TransformationSpec<T> {
    let host: KernelFn<T> = Arc::new(|args: &KernelArgs<'_, T>, outs: &mut [&mut [T]]| {
        let w = MixingWeights::unpack(args.inputs[0]);
        let r = args.range.clone();
        let [d21, d31, d32] = [args.inputs[1], args.inputs[2], args.inputs[3]].map(|x| &x[r.clone()]);
        for (k, out) in outs[0][r.clone()].iter_mut().enumerate() {
            *out = assemble_probability(&w, [d21[k], d31[k], d32[k]]);
        }
    });
    let device = per_element(|i, args, outs: &mut [&mut [T]]| {
        let w = MixingWeights::unpack(args.inputs[0]);
        outs[0][i] = assemble_probability(&w, [args.inputs[1][i], args.inputs[2][i], args.inputs[3][i]]);
    });
    let rule = ShapeRule::Explicit(Arc::new(|shapes: &[&Shape]| {
        if shapes[0].len() != WEIGHT_LEN {
            return Err(ShapeIssue {
                port: 0,
                expected: format!("[{WEIGHT_LEN}]"),
                actual: shapes[0].to_string(),
            });
        }
        for port in 2..4 {
            if shapes[port] != shapes[1] {
                return Err(ShapeIssue {
                    port,
                    expected: shapes[1].to_string(),
                    actual: shapes[port].to_string(),
                });
            }
        }
        Ok(shapes[1].clone())
    }));
    TransformationSpec::new(name)
        .input("weights", Some(1))
        .input("phase21", Some(1))
        .input("phase31", Some(1))
        .input("phase32", Some(1))
        .output("probability", rule)
        .kernel(DeviceKind::Host, host)
        .kernel(DeviceKind::Sim, device)
}

/// Variables owned by one oscillation-probability subchain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OscVariables {
    pub theta12: VariableRef,
    pub theta13: VariableRef,
    pub theta23: VariableRef,
    pub delta_cp: VariableRef,
    pub dm2_21: VariableRef,
    pub dm2_31: VariableRef,
    pub baseline: VariableRef,
}

/// Node handles of one oscillation-probability subchain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OscChain {
    pub weights: NodeId,
    pub phases: [NodeId; 3],
    pub assembly: NodeId,
    pub variables: OscVariables,
}

impl OscChain {
    pub fn output(&self) -> PortRef {
        self.assembly.output(0)
    }

    /// All nodes, in construction order.
    pub fn nodes(&self) -> [NodeId; 5] {
        [
            self.weights,
            self.phases[0],
            self.phases[1],
            self.phases[2],
            self.assembly,
        ]
    }
}

/// Adds weights, three phase nodes and the assembly fed by `energy`.
/// Variables are created as `{prefix}.theta12`, …, `{prefix}.L`.
pub fn add_oscprob_chain<T: Scalar>(
    graph: &mut Graph<T>,
    energy: PortRef,
    prefix: &str,
    alpha: Flavor,
    beta: Flavor,
    params: &OscParams,
    baseline: Baseline,
) -> Result<OscChain, GraphError> {
    let mut var = |name: &str, value: f64| graph.make_variable(&format!("{prefix}.{name}"), value);
    let variables = OscVariables {
        theta12: var("theta12", params.theta12)?,
        theta13: var("theta13", params.theta13)?,
        theta23: var("theta23", params.theta23)?,
        delta_cp: var("delta_cp", params.delta_cp)?,
        dm2_21: var("dm2_21", params.dm2_21)?,
        dm2_31: var("dm2_31", params.dm2_31)?,
        baseline: var("L", baseline.km())?,
    };
    let weights = graph.add_node(mixing_weights_spec(
        &format!("{prefix}.weights"),
        alpha,
        beta,
        params.antineutrino,
    ))?;
    for v in [
        variables.theta12,
        variables.theta13,
        variables.theta23,
        variables.delta_cp,
    ] {
        graph.attach_variable(weights, v)?;
    }
    let mut phases = [weights; 3];
    for (slot, pair) in phases.iter_mut().zip(MassPair::ALL) {
        let node = graph.add_node(phase_spec(&format!("{prefix}.phase{}", pair.label()), pair))?;
        graph.bind(energy, node.input(0))?;
        let vars: &[VariableRef] = match pair {
            MassPair::P21 => &[variables.dm2_21, variables.baseline],
            MassPair::P31 => &[variables.dm2_31, variables.baseline],
            MassPair::P32 => &[variables.dm2_31, variables.dm2_21, variables.baseline],
        };
        for &v in vars {
            graph.attach_variable(node, v)?;
        }
        *slot = node;
    }
    let assembly = graph.add_node(assembly_spec(&format!("{prefix}.oscprob")))?;
    graph.bind(weights.output(0), assembly.input(0))?;
    for (k, node) in phases.iter().enumerate() {
        graph.bind(node.output(0), assembly.input(k + 1))?;
    }
    Ok(OscChain {
        weights,
        phases,
        assembly,
        variables,
    })
}
