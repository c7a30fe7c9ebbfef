//! Identification of port-Hamiltonian subsystems from input-output data.
//!
//! Subsystems are modelled as structured networks (`J = B - Bᵀ`, `R = A Aᵀ`,
//! ELU-bounded `H`, constant `G`), assembled into a composite through a known
//! skew-symmetric interconnection, and trained with an encoder plus
//! truncated RK4 simulation loss.

pub mod ad;
pub mod dataset;
pub mod io;
pub mod ode;
pub mod phs;
pub mod plant;
pub mod protocol;
pub mod train;
pub mod transfer;

pub use dataset::{Dataset, DatasetMeta, NoiseReference};
