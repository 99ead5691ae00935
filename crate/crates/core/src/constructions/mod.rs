//! Executable martingale constructions: divergent martingales with their
//! stage bookkeeping and witness paths, the mass-push cascade, and small
//! `L^1` perturbations that push a martingale above a level on a small cell.

pub mod bookkeeping;
pub mod cascade;
pub mod divergent;
pub mod perturb;

pub use bookkeeping::{Bookkeeping, Sign, Stage};
pub use divergent::{build_linfty_divergent, build_ui_divergent, Divergent, Witness};
pub use perturb::{diverge_near, perturb_l1, DivergeNear, Perturbation, Variant};
