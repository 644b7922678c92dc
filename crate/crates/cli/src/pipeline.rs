//! The stages behind the subcommands: placement, calibration and the
//! fuse/filter/broadcast simulation loop.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Matrix3, Vector3};
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use ubimap_core::calib::{
    build_graph, global_cost, propagate, refine, CalibError, CorrespondenceSet, IcpOptions, TransformGraph,
};
use ubimap_core::coverage::{
    candidate_lattice, plan_exhaustive, plan_greedy, CoverageError, CoverageProblem, PlacementPlan,
};
use ubimap_core::fusion::{
    ekf_predict, ekf_update, wrap_angle, BodyOdometry, CalibratedCamera, CellState, FusionContext, GaussianBelief,
    GridMap, PositionObservation,
};
use ubimap_core::geom::{rotation_distance, RigidTransform};
use ubimap_core::netsim::{
    ClientEvent, ClientState, Endpoint, MapServer, Message, MessageKind, NetworkParams, ProtocolError,
    RobotPoseUpdate, SeqCounter, SimNetwork,
};
use ubimap_core::sensim::{
    camera_pose, ground_to_world, observe_frame, observe_landmarks, robot_local_map, stream_rng,
};
use ubimap_core::world::{visible_footprint_cells, CameraSpec, CellIndex, GridWorld, Scenario};

use crate::report::{LocalizationSample, RunReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("scenario has no cameras")]
    NoCameras,
    #[error("calibration failed: {0}")]
    Calibration(#[from] CalibError),
    #[error("placement failed: {0}")]
    Coverage(#[from] CoverageError),
    #[error("protocol failure: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("invalid parameters: {0}")]
    Params(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::NoCameras | PipelineError::Calibration(_) => 3,
            PipelineError::Coverage(CoverageError::InvalidProblem(_)) => 2,
            _ => 4,
        }
    }
}

/// Placement candidates: a generated lattice when the scenario asks for one,
/// otherwise the scenario's cameras.
pub fn plan_candidates(scenario: &Scenario) -> Vec<CameraSpec> {
    let p = &scenario.plan;
    if p.lattice_step > 0.0 {
        candidate_lattice(&scenario.world, p.lattice_step, p.lattice_height, p.lattice_hfov, p.lattice_vfov, p.lattice_range)
    } else {
        scenario.cameras.clone()
    }
}

pub fn plan(scenario: &Scenario, exact: bool) -> Result<(CoverageProblem, PlacementPlan), PipelineError> {
    let candidates = plan_candidates(scenario);
    let budget = scenario.plan.budget.min(candidates.len()).max(1);
    let problem = CoverageProblem::new(
        scenario.world.clone(),
        candidates,
        None,
        scenario.plan.min_overlap,
        scenario.plan.max_overlap,
        budget,
    )?;
    let plan = if exact { plan_exhaustive(&problem)? } else { plan_greedy(&problem)? };
    Ok((problem, plan))
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub graph: TransformGraph,
    /// Poses relative to the reference camera, before refinement.
    pub initial: BTreeMap<u32, RigidTransform>,
    pub refined: BTreeMap<u32, RigidTransform>,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    /// Camera-to-world poses, anchored at the reference camera's known pose.
    pub world_poses: BTreeMap<u32, RigidTransform>,
    /// Rotation (rad) and translation (m) error of each world pose.
    pub errors: BTreeMap<u32, (f64, f64)>,
}

impl Calibration {
    pub fn cost_before(&self) -> f64 {
        self.cost_trace[0]
    }

    pub fn cost_after(&self) -> f64 {
        *self.cost_trace.last().expect("trace starts with the initial cost")
    }
}

/// Landmark-based calibration of `cameras` against the ground truth in `world`.
pub fn calibrate(cameras: &[CameraSpec], world: &GridWorld, sigma: f64, seed: u64) -> Result<Calibration, PipelineError> {
    let mut cams: Vec<&CameraSpec> = cameras.iter().collect();
    cams.sort_by_key(|c| c.id);
    let reference = cams.first().ok_or(PipelineError::NoCameras)?;
    let obs: Vec<_> = cams.iter().map(|c| observe_landmarks(c, world, sigma, seed)).collect();
    let mut sets = Vec::new();
    for a in 0..cams.len() {
        for b in a + 1..cams.len() {
            let set = CorrespondenceSet::from_observations(cams[a].id, cams[b].id, &obs[a], &obs[b]);
            if set.pairs.len() >= 3 {
                sets.push(set);
            }
        }
    }
    let mut graph = if sets.is_empty() {
        TransformGraph {
            nodes: vec![reference.id],
            edges: vec![],
            reference: reference.id,
            failures: vec![],
        }
    } else {
        build_graph(&sets, &IcpOptions::default(), reference.id)?
    };
    graph.nodes = cams.iter().map(|c| c.id).collect();
    let initial = propagate(&graph)?;
    let refined = refine(&graph, &initial)?;
    debug_assert!(global_cost(&graph, &refined.poses).is_ok());

    let anchor = camera_pose(reference);
    let mut world_poses = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for cam in &cams {
        let pose = anchor.compose(&refined.poses[&cam.id]);
        let truth = camera_pose(cam);
        errors.insert(cam.id, (rotation_distance(&pose, &truth), (pose.translation - truth.translation).norm()));
        world_poses.insert(cam.id, pose);
    }
    Ok(Calibration {
        graph,
        initial,
        refined: refined.poses,
        cost_trace: refined.cost_trace,
        iterations: refined.iterations,
        world_poses,
        errors,
    })
}

/// Simulation step in seconds (camera frame period).
pub const TICK: f64 = 0.05;
const TICK_MS: u64 = 50;
/// Variance floors that keep the filter well conditioned in noise-free runs.
const MIN_TAG_SIGMA: f64 = 1e-6;
const MIN_ODOM_VAR: f64 = 1e-4;

/// Which mechanism first put a blind-spot obstacle into the server map.
#[derive(Debug, Clone, PartialEq)]
pub struct BlindSpotEvent {
    pub cell: CellIndex,
    pub t: f64,
    /// Sender of the upload that introduced it, or `None` if camera fusion did.
    pub upload_from: Option<u16>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: RunReport,
    pub server_map: GridMap,
    pub clients: BTreeMap<u16, ClientState>,
    /// MAP_UPDATE seqs each client applied, in order.
    pub applied_seqs: BTreeMap<u16, Vec<u32>>,
    /// Obstacle cells no camera can see.
    pub blind_cells: BTreeSet<CellIndex>,
    pub blind_events: Vec<BlindSpotEvent>,
    pub capture: Vec<Vec<u8>>,
    pub calibration: Calibration,
    /// Ground truth at the end of the run.
    pub world: GridWorld,
}

/// Advances a scripted robot one tick: straight ahead at its speed, turning
/// around instead when the next position is blocked. Returns the body-frame
/// odometry `(forward, left, turn)`.
fn step_robot(world: &mut GridWorld, idx: usize, dt: f64) -> Vector3<f64> {
    let robot = world.robots[idx].clone();
    if robot.speed == 0.0 {
        return Vector3::zeros();
    }
    let (s, c) = robot.pose.theta.sin_cos();
    let nx = robot.pose.x + robot.speed * dt * c;
    let ny = robot.pose.y + robot.speed * dt * s;
    let own = world.robot_cell(&robot);
    let blocked = match world.cell_of(nx, ny) {
        None => true,
        Some(cell) => {
            world.is_wall(cell)
                || world.obstacles.iter().any(|o| o.cell == cell)
                || world
                    .robots
                    .iter()
                    .enumerate()
                    .any(|(k, r)| k != idx && Some(cell) != own && world.robot_cell(r) == Some(cell))
        }
    };
    let r = &mut world.robots[idx];
    if blocked {
        r.pose.theta = wrap_angle(r.pose.theta + std::f64::consts::PI);
        Vector3::new(0.0, 0.0, std::f64::consts::PI)
    } else {
        r.pose.x = nx;
        r.pose.y = ny;
        Vector3::new(robot.speed * dt, 0.0, 0.0)
    }
}

/// Ground-truth map state of every cell.
pub fn truth_map(world: &GridWorld) -> GridMap {
    let mut map = GridMap::new(world.width, world.height, world.cell_size);
    for i in 0..world.len() {
        map.cells[i] = if world.cells[i] == ubimap_core::world::CellKind::Wall {
            CellState::Wall
        } else {
            CellState::Explored
        };
    }
    for o in &world.obstacles {
        let i = world.index(o.cell);
        map.cells[i] = CellState::Obstacle;
    }
    for r in &world.robots {
        if let Some(c) = world.robot_cell(r) {
            map.cells[world.index(c)] = CellState::Robot;
        }
    }
    map
}

/// Cells at least one camera observes.
pub fn visible_cells(cameras: &[CameraSpec], world: &GridWorld) -> BTreeSet<CellIndex> {
    cameras.iter().flat_map(|c| visible_footprint_cells(c, world)).collect()
}

fn period_ms(ms: f64) -> Result<u64, PipelineError> {
    if !(ms.is_finite() && ms >= 1.0) {
        return Err(PipelineError::Params(format!("period {ms} ms must be at least 1 ms")));
    }
    Ok(ms.round() as u64)
}

struct Loop<'a> {
    net: SimNetwork,
    server: MapServer,
    clients: BTreeMap<u16, ClientState>,
    applied: BTreeMap<u16, Vec<u32>>,
    robot_seqs: SeqCounter,
    beliefs: BTreeMap<u16, GaussianBelief>,
    blind_cells: &'a BTreeSet<CellIndex>,
    blind_events: Vec<BlindSpotEvent>,
    last_broadcast_revision: Option<u32>,
}

impl Loop<'_> {
    fn note_blind(&mut self, t: f64, upload_from: Option<u16>) {
        for &cell in self.blind_cells {
            if self.server.map.state(cell) == CellState::Obstacle && !self.blind_events.iter().any(|e| e.cell == cell) {
                self.blind_events.push(BlindSpotEvent { cell, t, upload_from });
            }
        }
    }

    fn deliver(&mut self, now: f64) -> Result<(), PipelineError> {
        for (dest, msg) in self.net.step(now) {
            match dest {
                Endpoint::Server => {
                    let outcome = self.server.ingest(&msg)?;
                    if outcome.merged {
                        self.note_blind(now, Some(msg.sender));
                    }
                    if let Some(ack) = outcome.ack {
                        self.net.send(now, Endpoint::Client(msg.sender), &ack)?;
                    }
                }
                Endpoint::Client(id) => {
                    if let Some(client) = self.clients.get_mut(&id) {
                        if client.apply(&msg)? == ClientEvent::MapApplied {
                            self.applied.entry(id).or_default().push(msg.seq);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn broadcast(&mut self, now: f64) -> Result<(), PipelineError> {
        let update = self.server.broadcast()?;
        self.last_broadcast_revision = Some(self.server.map.revision);
        let ids: Vec<u16> = self.clients.keys().copied().collect();
        for id in ids {
            self.net.send(now, Endpoint::Client(id), &update)?;
            if let Some(b) = self.beliefs.get(&id) {
                let pose = RobotPoseUpdate {
                    robot_id: id,
                    x: b.mean.x,
                    y: b.mean.y,
                    theta: b.mean.z,
                };
                let msg = self.server.pose_message(pose);
                self.net.send(now, Endpoint::Client(id), &msg)?;
            }
        }
        Ok(())
    }

    fn send_from_robot(&mut self, now: f64, robot: u16, kind: MessageKind, payload: Vec<u8>) -> Result<(), PipelineError> {
        let msg: Message = self.robot_seqs.message(robot, kind, payload);
        self.net.send(now, Endpoint::Server, &msg)?;
        Ok(())
    }
}

/// Runs calibration and then the fuse/filter/broadcast loop for `duration`
/// seconds of simulated time, followed by a quiet period in which in-flight
/// messages drain.
pub fn simulate(scenario: &Scenario, duration: f64) -> Result<SimOutcome, PipelineError> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(PipelineError::Params(format!("duration {duration} must be non-negative")));
    }
    let sim = &scenario.sim;
    let cameras: Vec<CameraSpec> = if scenario.cameras.is_empty() && scenario.plan.lattice_step > 0.0 {
        let (problem, placement) = plan(scenario, false)?;
        problem.candidates.into_iter().filter(|c| placement.selected.contains(&c.id)).collect()
    } else {
        scenario.cameras.clone()
    };
    let calibration = calibrate(&cameras, &scenario.world, sim.noise_sigma, sim.seed)?;
    let tag_sigma = sim.noise_sigma.max(MIN_TAG_SIGMA);
    let ctx = FusionContext {
        cameras: cameras
            .iter()
            .map(|c| {
                (
                    c.id,
                    CalibratedCamera {
                        spec: c.clone(),
                        pose: calibration.world_poses[&c.id],
                    },
                )
            })
            .collect(),
        tag_to_robot: scenario.world.robots.iter().map(|r| (r.tag, r.id)).collect(),
        tag_sigma,
    };
    let odom_var = (sim.odom_sigma * sim.odom_sigma).max(MIN_ODOM_VAR);
    let motion = BodyOdometry {
        q: Matrix3::from_diagonal_element(odom_var),
    };
    let observation = PositionObservation::isotropic(tag_sigma);
    let odom_noise = Normal::new(0.0, sim.odom_sigma).map_err(|e| PipelineError::Params(e.to_string()))?;

    let mut world = scenario.world.clone();
    let visible = visible_cells(&cameras, &world);
    let blind_cells: BTreeSet<CellIndex> = world
        .obstacles
        .iter()
        .map(|o| o.cell)
        .filter(|c| !visible.contains(c))
        .collect();

    let net = SimNetwork::new(NetworkParams {
        latency_ms: sim.net_latency_ms,
        jitter_ms: sim.net_jitter_ms,
        loss_probability: sim.net_loss,
        seed: sim.seed,
    })
    .map_err(PipelineError::Params)?;
    let mut lp = Loop {
        net,
        server: MapServer::new(GridMap::for_world(&world)),
        clients: world
            .robots
            .iter()
            .map(|r| (r.id, ClientState::new(r.id, world.width, world.height, world.cell_size)))
            .collect(),
        applied: BTreeMap::new(),
        robot_seqs: SeqCounter::default(),
        beliefs: BTreeMap::new(),
        blind_cells: &blind_cells,
        blind_events: Vec::new(),
        last_broadcast_revision: None,
    };
    let broadcast_ms = period_ms(sim.broadcast_period_ms)?;
    let upload_ms = period_ms(sim.upload_period_ms)?;
    let ticks = (duration / TICK).round() as u64;
    let mut localization = Vec::new();

    let robot_ids: Vec<u16> = world.robots.iter().map(|r| r.id).collect();
    for &id in &robot_ids {
        lp.send_from_robot(0.0, id, MessageKind::Hello, Vec::new())?;
    }

    for k in 0..=ticks {
        let t_ms = k * TICK_MS;
        let t = t_ms as f64 / 1000.0;

        if k > 0 {
            for idx in 0..world.robots.len() {
                let moved = step_robot(&mut world, idx, TICK);
                let id = world.robots[idx].id;
                let mut rng = stream_rng(&[sim.seed, 3, k, id as u64]);
                let u = if sim.odom_sigma > 0.0 {
                    moved + Vector3::new(odom_noise.sample(&mut rng), odom_noise.sample(&mut rng), odom_noise.sample(&mut rng))
                } else {
                    moved
                };
                if let Some(b) = lp.beliefs.get_mut(&id) {
                    *b = ekf_predict(b, &u, &motion);
                }
            }
        }

        let frame = observe_frame(&cameras, &world, sim.noise_sigma, sim.seed, t);
        lp.server.map.fuse_frame(&frame, &ctx, t);
        lp.note_blind(t, None);

        let mut tags = frame.tags.clone();
        tags.sort_by_key(|d| (d.camera_id, d.tag_id));
        for det in &tags {
            let (Some(&robot), Some(cam)) = (ctx.tag_to_robot.get(&det.tag_id), ctx.cameras.get(&det.camera_id)) else {
                continue;
            };
            let (x, y) = ground_to_world(&cam.spec, &cam.pose, det.ground_position);
            let z = DVector::from_column_slice(&[x, y]);
            match lp.beliefs.get_mut(&robot) {
                Some(b) => *b = ekf_update(b, &z, &observation),
                None => {
                    let v = tag_sigma * tag_sigma;
                    lp.beliefs.insert(
                        robot,
                        GaussianBelief::new(
                            Vector3::new(x, y, 0.0),
                            Matrix3::from_diagonal(&Vector3::new(v, v, std::f64::consts::PI.powi(2))),
                        ),
                    );
                }
            }
        }
        for r in &world.robots {
            if let Some(b) = lp.beliefs.get(&r.id) {
                localization.push(LocalizationSample {
                    t,
                    robot_id: r.id,
                    error: (b.mean.x - r.pose.x).hypot(b.mean.y - r.pose.y),
                });
            }
        }

        lp.deliver(t)?;
        if t_ms.is_multiple_of(broadcast_ms) {
            lp.broadcast(t)?;
        }
        if t_ms > 0 && t_ms.is_multiple_of(upload_ms) {
            for idx in 0..world.robots.len() {
                let local = robot_local_map(&world, idx, sim.robot_sense_radius);
                let payload = ubimap_core::netsim::encode_map_payload(&local)?;
                lp.send_from_robot(t, world.robots[idx].id, MessageKind::SensorUpload, payload)?;
            }
        }
        lp.deliver(t)?;
    }

    // Quiet period: nothing new is produced, but uploads still in flight may
    // change the map, which triggers one more broadcast.
    let end = ticks as f64 * TICK;
    if lp.last_broadcast_revision != Some(lp.server.map.revision) {
        lp.broadcast(end)?;
    }
    while let Some(next) = lp.net.drain_time() {
        lp.deliver(next)?;
        if lp.last_broadcast_revision != Some(lp.server.map.revision) {
            lp.broadcast(next)?;
        }
    }

    let truth = truth_map(&world);
    let matching = visible
        .iter()
        .filter(|&&c| lp.server.map.state(c) == truth.state(c))
        .count();
    let map_accuracy = if visible.is_empty() { 1.0 } else { matching as f64 / visible.len() as f64 };
    let free = world.free_cells();
    let coverage_ratio = if free.is_empty() {
        1.0
    } else {
        free.iter().filter(|c| visible.contains(c)).count() as f64 / free.len() as f64
    };
    let mut stats = lp.net.stats;
    stats.stale = lp.clients.values().map(|c| c.stale).sum();
    let report = RunReport {
        localization,
        map_accuracy,
        coverage_ratio,
        calibration_errors: calibration.errors.clone(),
        stats,
        server_revision: lp.server.map.revision,
        client_revisions: lp.clients.iter().map(|(id, c)| (*id, c.map.revision)).collect(),
    };
    Ok(SimOutcome {
        report,
        server_map: lp.server.map,
        clients: lp.clients,
        applied_seqs: lp.applied,
        blind_cells: blind_cells.clone(),
        blind_events: lp.blind_events,
        capture: lp.net.capture,
        calibration,
        world,
    })
}

/// The map the cameras produce from a single frame of the initial world,
/// using their true poses.
pub fn snapshot(scenario: &Scenario) -> GridMap {
    let ctx = FusionContext {
        cameras: scenario
            .cameras
            .iter()
            .map(|c| {
                (
                    c.id,
                    CalibratedCamera {
                        spec: c.clone(),
                        pose: camera_pose(c),
                    },
                )
            })
            .collect(),
        tag_to_robot: scenario.world.robots.iter().map(|r| (r.tag, r.id)).collect(),
        tag_sigma: scenario.sim.noise_sigma.max(MIN_TAG_SIGMA),
    };
    let mut map = GridMap::for_world(&scenario.world);
    let frame = observe_frame(&scenario.cameras, &scenario.world, scenario.sim.noise_sigma, scenario.sim.seed, 0.0);
    map.fuse_frame(&frame, &ctx, 0.0);
    map
}
