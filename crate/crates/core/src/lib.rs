//! Optimal investment on finite scenario-tree markets with non-concave,
//! bounded-above utilities and prospect-theory preferences.
//!
//! All numerical code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! command-line front end and file formats use.

pub mod cpt_solver;
pub mod dp_solver;
pub mod law;
pub mod no_arbitrage;
pub mod phenomena;
pub mod preferences;
pub mod scalar;
pub mod search;
mod simplex;
pub mod tree;

pub use scalar::Scalar;

pub type Tree = tree::ScenarioTree<f64>;
pub type TreeFile = tree::TreeSpec<f64>;
pub type Strategy = tree::Strategy<f64>;
pub type Claim = tree::Claim<f64>;
pub type Law = law::DiscreteLaw<f64>;
pub type Utility = preferences::UtilityFunction<f64>;
pub type Distortion = preferences::DistortionFunction<f64>;
pub type Cpt = preferences::CptPreference<f64>;
pub type Preference = preferences::Preference<f64>;
pub type NaReport = no_arbitrage::NaReport<f64>;
pub type DpSolution = dp_solver::DpSolution<f64>;
pub type ChoquetValue = cpt_solver::ChoquetValue<f64>;
