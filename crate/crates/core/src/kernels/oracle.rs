//! Amplitude-sum oscillation probability.
//!
//! Shares no code with [`super::osc`]: the mixing matrix is written out in
//! closed form and the probability is the squared modulus of the flavor
//! amplitude `Σ_i V*αi Vβi exp(−i·2Δ_i1)`. Used to cross-check the
//! term-by-term route.

use num_complex::Complex;

use super::osc::{Baseline, EnergyVector, Flavor, OscParams};
use crate::scalar::Scalar;

fn closed_form_matrix(params: &OscParams) -> [[Complex<f64>; 3]; 3] {
    // antineutrinos: V → V*, equivalently δ → −δ in the closed form
    let delta = if params.antineutrino {
        -params.delta_cp
    } else {
        params.delta_cp
    };
    let (s12, c12) = (params.theta12.sin(), params.theta12.cos());
    let (s13, c13) = (params.theta13.sin(), params.theta13.cos());
    let (s23, c23) = (params.theta23.sin(), params.theta23.cos());
    let e_pos = Complex::new(delta.cos(), delta.sin());
    let e_neg = Complex::new(delta.cos(), -delta.sin());
    let r = |x: f64| Complex::new(x, 0.0);
    [
        [r(c12 * c13), r(s12 * c13), e_neg * s13],
        [
            r(-s12 * c23) - e_pos * (c12 * s23 * s13),
            r(c12 * c23) - e_pos * (s12 * s23 * s13),
            r(s23 * c13),
        ],
        [
            r(s12 * s23) - e_pos * (c12 * c23 * s13),
            r(-c12 * s23) - e_pos * (s12 * c23 * s13),
            r(c23 * c13),
        ],
    ]
}

/// P(α→β) as `|Σ_i V*αi Vβi exp(−i·2Δ_i1)|²`, evaluated in double precision.
pub fn oscprob_amplitude_oracle<T: Scalar>(
    alpha: Flavor,
    beta: Flavor,
    params: &OscParams,
    baseline: Baseline,
    energies: &EnergyVector<T>,
) -> Vec<T> {
    let v = closed_form_matrix(params);
    let (a, b) = (alpha as usize, beta as usize);
    let masses = [0.0, params.dm2_21, params.dm2_31];
    let coupling: Vec<Complex<f64>> = (0..3).map(|i| v[a][i].conj() * v[b][i]).collect();
    energies
        .as_slice()
        .iter()
        .map(|e| {
            let e_gev = e.as_f64() * 1e-3;
            let amplitude: Complex<f64> = (0..3)
                .map(|i| {
                    let phi = 2.0 * 1.26693268 * masses[i] * baseline.km() / e_gev;
                    coupling[i] * Complex::new(phi.cos(), -phi.sin())
                })
                .sum();
            T::of(amplitude.norm_sqr())
        })
        .collect()
}
