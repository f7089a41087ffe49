//! Exact quantum and semiclassical orbital magnetic response of a confined two-dimensional
//! electron gas.
//!
//! The exact side diagonalizes the Weyl-quantized Hamiltonian ([`quantum`]) and sums grand-canonical
//! quantities over the spectrum ([`thermo`]). The semiclassical side evaluates the mean ħ-expansion
//! and the periodic-orbit sum ([`semiclassical`]) from classical data ([`classical`], [`orbits`]).
//! [`scenario`] runs configured sweeps and writes CSV tables plus a run manifest.

// `!(x > 0.0)` rejects NaN as well; quadrature nodes are kept at full published precision.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod classical;
pub mod dhva;
pub mod error;
pub mod model;
pub mod numerics;
pub mod orbits;
pub mod quantum;
pub mod scenario;
pub mod semiclassical;
pub mod thermo;

pub use error::{Error, Result};
pub use model::{GaugeField, HamiltonianSpec, PhasePoint, PotentialModel};
