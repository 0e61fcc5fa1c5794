//! Conditional P&L distributions of hedged derivative positions.
//!
//! The library evolves the density `P(F | S, t)` of a contract value `F`
//! backward from maturity under a hedging strategy, extracts its moment
//! surfaces, builds variance-minimising and quantile-maximising hedges and
//! checks all of it against a Monte-Carlo path simulation.
//!
//! Everything is generic over the floating-point type; the aliases at the
//! crate root fix it to `f64` or `f32`.

// `!(x > y)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evolution;
pub mod grids;
pub mod hedging;
pub mod interp;
pub mod market;
pub mod moments;
pub mod monte_carlo;
pub mod payoff;
pub mod report;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use evolution::{
    backward_step, backward_sweep, pde_step, EvolutionOptions, EvolutionReport, Retain,
};
pub use grids::{build_grids, ConditionalPdf, GridConfig, SpaceGrid, TimeGrid};
pub use hedging::{
    quantile_dp, quantile_hedge_step, variance_min_hedge, HedgeStrategy, HedgeTable,
};
pub use interp::FRemap;
pub use market::{transition_density, MarketParams};
pub use moments::{bs_closed_form, evolve_moments, pdf_moments, MomentSurfaces};
pub use monte_carlo::{empirical_distribution, McConfig, McResult, TerminalSampling};
pub use payoff::{terminal_pdf, Payoff, TerminalLaw};
pub use scalar::Scalar;

pub type MarketParams64 = MarketParams<f64>;
pub type MarketParams32 = MarketParams<f32>;
pub type ConditionalPdf64 = ConditionalPdf<f64>;
pub type ConditionalPdf32 = ConditionalPdf<f32>;
pub type SpaceGrid64 = SpaceGrid<f64>;
pub type SpaceGrid32 = SpaceGrid<f32>;
pub type TimeGrid64 = TimeGrid<f64>;
pub type TimeGrid32 = TimeGrid<f32>;
pub type HedgeStrategy64 = HedgeStrategy<f64>;
pub type HedgeStrategy32 = HedgeStrategy<f32>;
pub type TerminalLaw64 = TerminalLaw<f64>;
pub type TerminalLaw32 = TerminalLaw<f32>;
pub type MomentSurfaces64 = MomentSurfaces<f64>;
pub type McResult64 = McResult<f64>;
