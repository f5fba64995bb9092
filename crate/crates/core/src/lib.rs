//! Integrated power and thermal management of a power-split hybrid electric
//! vehicle: plant and map models, drive-cycle preview, multi-horizon MPC,
//! dynamic programming benchmark and a closed-loop simulation harness.

pub mod controllers;
pub mod cycle;
pub mod dp;
pub mod harness;
pub mod horizon;
pub mod maps;
pub mod nlp;
pub mod plant;
pub mod powertrain;
pub mod table;
