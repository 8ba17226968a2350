//! Diffuse derivatives, D-solution checks and fibre-regular solvers for
//! degenerate elliptic systems in nondivergence form.

pub mod banded;
pub mod campanato;
pub mod checker;
pub mod error;
pub mod linalg;
pub mod frames;
pub mod grid;
pub mod reference;
pub mod solver;
pub mod system;
pub mod tensor;
pub mod young;

pub use error::{Error, Result};
