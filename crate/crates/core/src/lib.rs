//! Transmit power allocation for distributed detection over a virtual MIMO
//! channel `y = H A u + n`.
//!
//! Allocations maximise a moment-matched (Gaussian) J-divergence between the
//! received-signal densities under the two hypotheses; [`montecarlo`]
//! checks the result against the fusion center's actual detection
//! probability. Powers are linear mW throughout; dBm appears only in
//! [`config`] and at the CLI.

pub mod allocator;
pub mod config;
pub mod divergence;
pub mod montecarlo;
pub mod scenario;

pub use allocator::{general_allocate, waterfill_allocate, AllocError, GeneralOptions, GeneralSolution, KktReport};
pub use divergence::{j_approx, j_gaussian_mimo, j_orthogonal, DivergenceError, GaussianMoments};
pub use montecarlo::{estimate_pd_fc, McConfig, McError, McEstimate};
pub use scenario::{Allocation, ChannelSpec, GainConvention, Scenario, ScenarioError, SensorProfile};
