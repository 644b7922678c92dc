//! Scenario runner: wires placement, calibration, fusion and the simulated
//! network together and writes reports and map images.

pub mod commands;
pub mod pipeline;
pub mod render;
pub mod report;
