//! Numeric transformations with host and simulated-device implementations.

pub mod elementwise;
pub mod oracle;
pub mod osc;

pub use oracle::oscprob_amplitude_oracle;
pub use osc::{
    add_oscprob_chain, osc_phase, oscprob_full, pmns_matrix, two_flavor_prob, Baseline, EnergyVector, Flavor, MassPair,
    MixingWeights, OscChain, OscError, OscParams, OscVariables, PmnsMatrix,
};
