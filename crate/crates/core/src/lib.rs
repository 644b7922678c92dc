//! Fixed-camera mapping testbed.
//!
//! Environment-mounted depth cameras are placed over a gridded floor
//! ([`coverage`]), calibrated into one global frame from shared landmarks
//! ([`calib`]), and their evidence is fused into an occupancy map that also
//! tracks robots ([`fusion`]). The map is broadcast to robot clients over a
//! simulated lossy network, and robot-contributed maps flow back ([`netsim`]).

pub mod geom;
pub mod world;
pub mod coverage;
pub mod fusion;
pub mod sensim;
pub mod calib;
pub mod netsim;
