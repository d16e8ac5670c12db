//! Distributionally robust regression of a single neuron.
//!
//! Fits w ↦ σ(w·x) under the worst reweighting of the empirical sample,
//! where the adversary pays a chi-squared penalty for moving mass away from
//! the uniform reference:
//!
//! ```text
//!   min_{‖w‖ ≤ W}  max_p  Σ_j p_j·(σ(w·x_j) − y_j)²  −  ν·χ²(p, p₀)
//! ```
//!
//! The solver is a primal-dual loop with geometrically growing step sizes:
//! momentum-extrapolated projected descent in w, and an exact proximal
//! update in p whose KKT system is solved in closed form. Everything the
//! loop relies on — the worst-case reweighting, the variance form of the
//! robust risk, the simplex projection, the step-size growth conditions —
//! ships with an independent numerical oracle in [`verify`].
//!
//! Module map:
//!
//! - [`activations`]: the admissible activation family and its growth /
//!   Lipschitz verification.
//! - [`datagen`]: dataset container and CSV round-trip, synthetic data
//!   generation, label truncation, and measured bound constants.
//! - [`empirical`]: losses, reweightings, divergences, the penalized
//!   objective, and closed forms for the inner maximization.
//! - [`solvers`]: projections, the primal step, the dual proximal step,
//!   and the brute-force ascent oracles.
//! - [`driver`]: the training loop, step-size schedule, trace diagnostics,
//!   run preparation, and the zero-candidate post-test.
//! - [`diagnostics`]: sharpness and margin estimation, ambiguity-radius
//!   check, and the final bounds report.
//! - [`verify`]: self-contained verification suites comparing every closed
//!   form against an oracle.

pub mod activations;
pub mod datagen;
pub mod diagnostics;
pub mod driver;
pub mod empirical;
pub mod error;
pub mod linalg;
pub mod solvers;
pub mod verify;

pub use error::{Error, Result};
