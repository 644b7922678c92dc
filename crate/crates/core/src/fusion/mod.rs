//! Map-server logic: fusing camera evidence into the shared occupancy map,
//! merging robot-contributed maps, and robot pose filters (EKF plus a grid
//! Bayes filter that serves as its brute-force reference).

mod ekf;
mod grid_bayes;
mod map;

use thiserror::Error;

pub use ekf::{
    ekf_predict, ekf_update, wrap_angle, BodyOdometry, GaussianBelief, LinearObservation, MotionModel,
    ObservationModel, PositionObservation, WorldOdometry,
};
pub use grid_bayes::{bayes_grid_step, bayes_predict, GridBelief};
pub use map::{
    fuse_frame, merge_robot_map, vote, CalibratedCamera, CellState, Fault, FuseOutcome, FusionContext, GridMap,
    RobotEstimate, T_CLEAR,
};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("map dimensions {found:?} do not match {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize, f64),
        found: (usize, usize, f64),
    },
    #[error("measurement is incompatible with every state")]
    DegenerateLikelihood,
    #[error("measurement noise is singular")]
    SingularNoise,
}
