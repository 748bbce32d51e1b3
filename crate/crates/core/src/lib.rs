//! Numerical core of the unified potential field planner.
//!
//! Everything in this crate is `no_std` (with `alloc`): Frenet kinematics,
//! style-weighted vehicle populations, benefit/risk field construction on a
//! uniform road grid, Cahn-Hilliard fusion of the two fields into a single
//! unified potential, and the adjoint-based best-response planner with its
//! population-level fixed-point iteration.
//!
//! File formats, scenario handling and the simulation loop live in the
//! `upf-sim` companion crate.
#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod control;
pub mod dynamics;
pub mod error;
pub mod fieldgrid;
pub mod fields;
pub mod fusion;
pub mod population;

pub use error::{Error, Result};
