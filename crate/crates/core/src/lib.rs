//! Hybrid analog-digital beamforming with RF-chain and phase-shifter on/off
//! control for a base station that senses targets, serves information
//! receivers and powers energy receivers at the same time.
//!
//! The crate minimises total base-station power draw, including a non-linear
//! power-amplifier model and the fixed cost of every active RF chain and phase
//! shifter, subject to SINR, trace-CRB, harvested-power and per-antenna limits.

pub mod analog_stage;
pub mod ao_driver;
pub mod array_sensing;
pub mod conic;
pub mod design;
pub mod digital_stage;
pub mod linalg;
pub mod onoff_control;
pub mod power_models;
pub mod scenario;
pub mod sca;
