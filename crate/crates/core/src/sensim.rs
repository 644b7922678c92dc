//! Synthetic sensing standing in for the depth cameras and their detector:
//! landmark points in camera frames, robot tag detections and per-cell
//! occupancy evidence. Every random draw comes from a generator seeded by the
//! identity of the stream it belongs to, so outputs do not depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::fusion::{CellState, GridMap};
use crate::geom::{Mat3, Point3, RigidTransform, Vec3};
use crate::world::{ground_footprint, visible_footprint_cells, CameraSpec, CellIndex, GridWorld};

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkObservation {
    pub camera_id: u32,
    pub landmark_id: u32,
    pub point: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagDetection {
    pub camera_id: u32,
    pub tag_id: u32,
    /// `(lateral, forward)` in the camera's ground frame.
    pub ground_position: (f64, f64),
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleEvidence {
    pub camera_id: u32,
    pub cell: CellIndex,
    pub occupied: bool,
    pub timestamp: f64,
}

/// Everything the cameras report for one instant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    pub obstacles: Vec<ObstacleEvidence>,
    pub tags: Vec<TagDetection>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream identified by `parts`.
pub fn stream_rng(parts: &[u64]) -> ChaCha8Rng {
    let seed = parts.iter().fold(0x5542_534D_u64, |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

const STREAM_LANDMARK: u64 = 1;
const STREAM_TAG: u64 = 2;

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    sigma * z
}

/// Camera-to-world pose. The camera frame has x to the right, y down and z
/// along the optical axis, which is pitched down to meet the ground at the
/// center of the footprint.
pub fn camera_pose(cam: &CameraSpec) -> RigidTransform {
    let fp = ground_footprint(cam);
    let (s, c) = cam.yaw.sin_cos();
    let right = Vec3::new(c, s, 0.0);
    let forward = Vec3::new(-s, c, 0.0);
    let axis = (forward * (fp.depth * 0.5) - Vec3::new(0.0, 0.0, cam.height)).normalize();
    let down = axis.cross(&right);
    RigidTransform::new(
        Mat3::from_columns(&[right, down, axis]),
        Vec3::new(cam.x, cam.y, cam.height),
    )
}

/// Ground-frame-to-world pose: x lateral, y forward, z up, origin at the
/// camera's ground point.
pub fn ground_frame(cam: &CameraSpec) -> RigidTransform {
    let mut frame = RigidTransform::rot_z(cam.yaw);
    frame.translation = Vec3::new(cam.x, cam.y, 0.0);
    frame
}

/// Fixed mounting transform from a camera's ground frame into its optical
/// frame. It depends only on height, pitch and field of view, which the
/// camera knows about itself.
pub fn ground_to_camera(cam: &CameraSpec) -> RigidTransform {
    camera_pose(cam).inverse().compose(&ground_frame(cam))
}

/// Maps a ground-frame detection to world `(x, y)` through a calibrated
/// camera-to-world pose.
pub fn ground_to_world(cam: &CameraSpec, calibrated_pose: &RigidTransform, ground: (f64, f64)) -> (f64, f64) {
    let p = calibrated_pose
        .compose(&ground_to_camera(cam))
        .apply(&Point3::new(ground.0, ground.1, 0.0));
    (p.x, p.y)
}

/// Landmarks whose ground projection falls inside the footprint, below the
/// camera and in line of sight, expressed in the camera frame with isotropic
/// noise.
pub fn observe_landmarks(cam: &CameraSpec, world: &GridWorld, sigma: f64, seed: u64) -> Vec<LandmarkObservation> {
    let fp = ground_footprint(cam);
    let to_camera = camera_pose(cam).inverse();
    world
        .landmarks
        .iter()
        .filter(|lm| {
            let p = lm.position;
            fp.contains(p.x, p.y)
                && p.z >= 0.0
                && p.z < cam.height
                && world.line_of_sight((cam.x, cam.y), (p.x, p.y))
        })
        .map(|lm| {
            let mut rng = stream_rng(&[seed, STREAM_LANDMARK, cam.id as u64, lm.id as u64]);
            let noise = Vec3::new(gaussian(&mut rng, sigma), gaussian(&mut rng, sigma), gaussian(&mut rng, sigma));
            LandmarkObservation {
                camera_id: cam.id,
                landmark_id: lm.id,
                point: to_camera.apply(&lm.position) + noise,
            }
        })
        .collect()
}

/// One detection per robot whose cell the camera covers.
pub fn observe_tags(cam: &CameraSpec, world: &GridWorld, sigma: f64, seed: u64, t: f64) -> Vec<TagDetection> {
    let fp = ground_footprint(cam);
    world
        .robots
        .iter()
        .filter(|r| {
            world.robot_cell(r).is_some_and(|cell| {
                let (cx, cy) = world.cell_center(cell);
                fp.contains(cx, cy) && world.line_of_sight((cam.x, cam.y), (cx, cy))
            })
        })
        .map(|r| {
            let mut rng = stream_rng(&[seed, STREAM_TAG, t.to_bits(), cam.id as u64, r.tag as u64]);
            let (lx, ly) = fp.to_local(r.pose.x, r.pose.y);
            TagDetection {
                camera_id: cam.id,
                tag_id: r.tag,
                ground_position: (lx + gaussian(&mut rng, sigma), ly + gaussian(&mut rng, sigma)),
                timestamp: t,
            }
        })
        .collect()
}

/// Occupancy evidence for every visible footprint cell. Obstacles, robots and
/// wall faces read as occupied.
pub fn observe_obstacles(cam: &CameraSpec, world: &GridWorld, t: f64) -> Vec<ObstacleEvidence> {
    let occupied = world.occupied_cells();
    visible_footprint_cells(cam, world)
        .into_iter()
        .map(|cell| ObstacleEvidence {
            camera_id: cam.id,
            cell,
            occupied: world.is_wall(cell) || occupied.contains(&cell),
            timestamp: t,
        })
        .collect()
}

/// All cameras' evidence and detections at time `t`, in camera order.
pub fn observe_frame(cameras: &[CameraSpec], world: &GridWorld, sigma: f64, seed: u64, t: f64) -> Frame {
    let mut frame = Frame::default();
    for cam in cameras {
        frame.obstacles.extend(observe_obstacles(cam, world, t));
        frame.tags.extend(observe_tags(cam, world, sigma, seed, t));
    }
    frame
}

/// A robot's own short-range scan as a local map fragment: cells within
/// `radius` of the robot in line of sight. Other robots are left unexplored.
pub fn robot_local_map(world: &GridWorld, robot_index: usize, radius: f64) -> GridMap {
    let robot = &world.robots[robot_index];
    let origin = (robot.pose.x, robot.pose.y);
    let others: Vec<CellIndex> = world
        .robots
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != robot_index)
        .filter_map(|(_, r)| world.robot_cell(r))
        .collect();
    let obstacles: Vec<CellIndex> = world.obstacles.iter().map(|o| o.cell).collect();
    let mut map = GridMap::new(world.width, world.height, world.cell_size);
    for i in 0..world.len() {
        let cell = world.cell_at(i);
        let (cx, cy) = world.cell_center(cell);
        if (cx - origin.0).hypot(cy - origin.1) > radius || others.contains(&cell) {
            continue;
        }
        if !world.cell_visible_from(origin, cell) {
            continue;
        }
        let state = if world.is_wall(cell) {
            CellState::Wall
        } else if obstacles.contains(&cell) {
            CellState::Obstacle
        } else {
            CellState::Explored
        };
        map.cells[i] = state;
    }
    map
}
