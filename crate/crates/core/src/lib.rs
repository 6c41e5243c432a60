//! Certification of the Lie–Galerkin controllability condition and synthesis of
//! two-valued (bang-bang) controls that steer the first `N` coordinates of a
//! quantum state onto a prescribed target.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: system descriptions, Galerkin compressions and the bilinear reduction.
//! * [`spectral`]: spectral gap tables, gap selections and decoupled-gap sets.
//! * [`lie`]: generated Lie algebras, the Lie–Galerkin search and connectedness chains.
//! * [`sim`]: propagators for piecewise-constant controls and interaction-frame tools.
//! * [`bangbang`]: conversion of bounded controls into `{0, a}`-valued ones.
//! * [`synth`]: end-to-end control synthesis with a constructive projection solver.
//!
//! Levels are indexed from 1 in every public interface that talks about
//! levels; matrices and vectors use ordinary 0-based storage.

pub mod bangbang;
pub mod linalg;
pub mod lie;
pub mod model;
pub mod sim;
pub mod spectral;
pub mod synth;

pub use linalg::{CMat, CVec, C64};
pub use model::{builtin_family, load_system, GalerkinPair, SystemModel};
pub use sim::{PiecewiseConstantControl, Segment, StateVector, ValueRange};
pub use synth::{project_match, ControlPlan, SynthOptions};
