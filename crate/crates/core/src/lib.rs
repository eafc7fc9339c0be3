//! Optimal-control toolkit for polarization transfer from an electron spin to
//! a nuclear spin coupled by a secular hyperfine interaction.
//!
//! The crate covers the full workflow on the 4x4 two-spin Hilbert space:
//!
//! * [`algebra`] -- product-operator basis, matrix exponentials, transfer
//!   efficiency.
//! * [`dynamics`] -- lab/rotating/interaction-frame Hamiltonians and
//!   piecewise-constant propagation.
//! * [`pulses`] -- analytic synthesizers for the time-optimal and
//!   conventional transfer sequences and their minimum-time formulas.
//! * [`optimizer`] -- GRAPE-style projected gradient ascent with amplitude
//!   and bandwidth constraints.
//! * [`analysis`] -- efficiency-vs-time curves, short-time Fourier
//!   transforms, square-wave harmonics, carrier-harmonic ratios.
//! * [`decomp`] -- numeric verification of the K1*A*K2 coset decomposition:
//!   admissible slow-rotation classes, the pull-through identity,
//!   surjectivity evidence for the fast-group parameterization, and the
//!   minimum-time lower bound.
//! * [`io`] -- pulse/result file formats and run configuration for the CLI.

pub mod algebra;
pub mod analysis;
pub mod decomp;
pub mod dynamics;
pub mod io;
mod numerics;
pub mod optimizer;
pub mod pulses;

pub use algebra::{BasisLabel, Operator, C64};
pub use dynamics::{ControlSequence, FastOp, Frame, SystemParams, Trajectory};
pub use pulses::{Scheme, TargetAxis, TransferKind, TransferTarget};
