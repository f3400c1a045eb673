//! Closed-loop optimal control of optical-lattice loading ramps.
//!
//! The crate is organized the way the experiment is:
//!
//! * [`waveform`]: exponential ramps, CRAB corrections, sampled waveforms;
//! * [`optimizer`]: Nelder-Mead simplex with restarts for noisy objectives;
//! * [`plant`]: the simulated Bose-Hubbard "experiment";
//! * [`tof`]: bimodal time-of-flight fits and the thermal-fraction figure of merit;
//! * [`control`]: the closed loop itself, landscape maps, logging and resume.

pub mod control;
pub mod optimizer;
pub mod plant;
pub mod tof;
pub mod waveform;
