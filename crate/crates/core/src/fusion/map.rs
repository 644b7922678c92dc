use std::collections::BTreeMap;

use crate::geom::RigidTransform;
use crate::sensim::{ground_to_world, Frame};
use crate::world::{CameraSpec, CellIndex, GridWorld};

use super::FusionError;

/// Seconds without occupied evidence after which an observed obstacle cell
/// reverts to explored.
pub const T_CLEAR: f64 = 2.0;

/// Per-cell map state. The discriminant is the wire byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum CellState {
    Unexplored = 0,
    Explored = 1,
    Wall = 2,
    Obstacle = 3,
    Robot = 4,
}

impl CellState {
    pub const ALL: [CellState; 5] = [
        CellState::Unexplored,
        CellState::Explored,
        CellState::Wall,
        CellState::Obstacle,
        CellState::Robot,
    ];

    pub fn from_byte(b: u8) -> Option<CellState> {
        CellState::ALL.get(b as usize).copied()
    }

    pub fn as_byte(self) -> u8 {
        self as u8
    }

    /// Conservativeness used to break weight ties.
    fn severity(self) -> u8 {
        match self {
            CellState::Unexplored => 0,
            CellState::Explored => 1,
            CellState::Robot => 2,
            CellState::Obstacle => 3,
            CellState::Wall => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotEstimate {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
    /// Cell marked `Robot` for this estimate, if any.
    pub cell: Option<CellIndex>,
}

/// A camera with its calibrated camera-to-world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedCamera {
    pub spec: CameraSpec,
    pub pose: RigidTransform,
}

/// What the map server knows besides the evidence itself.
#[derive(Debug, Clone, Default)]
pub struct FusionContext {
    pub cameras: BTreeMap<u32, CalibratedCamera>,
    pub tag_to_robot: BTreeMap<u32, u16>,
    /// Standard deviation of one tag detection, in meters.
    pub tag_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    UnknownCamera(u32),
    UnknownTag { camera_id: u32, tag_id: u32 },
    CellOutOfBounds { camera_id: u32, cell: CellIndex },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FuseOutcome {
    pub changed: bool,
    pub faults: Vec<Fault>,
}

/// Shared occupancy map owned by the map server.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub cells: Vec<CellState>,
    pub robot_poses: BTreeMap<u16, RobotEstimate>,
    pub revision: u32,
    static_walls: Vec<bool>,
    last_occupied: Vec<f64>,
}

impl GridMap {
    pub fn new(width: usize, height: usize, cell_size: f64) -> Self {
        Self {
            width,
            height,
            cell_size,
            cells: vec![CellState::Unexplored; width * height],
            robot_poses: BTreeMap::new(),
            revision: 0,
            static_walls: vec![false; width * height],
            last_occupied: vec![f64::NEG_INFINITY; width * height],
        }
    }

    /// Empty map that knows the building's static walls; they are marked once
    /// a camera sees them.
    pub fn for_world(world: &GridWorld) -> Self {
        let mut map = Self::new(world.width, world.height, world.cell_size);
        map.static_walls = world.cells.iter().map(|&k| k == crate::world::CellKind::Wall).collect();
        map
    }

    /// Map with the given cells and revision and no other bookkeeping, as
    /// received over the wire.
    pub fn from_cells(width: usize, height: usize, cell_size: f64, cells: Vec<CellState>, revision: u32) -> Self {
        assert_eq!(cells.len(), width * height, "cell count must match dimensions");
        let mut map = Self::new(width, height, cell_size);
        map.cells = cells;
        map.revision = revision;
        map
    }

    pub fn index(&self, cell: CellIndex) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn cell_at(&self, index: usize) -> CellIndex {
        CellIndex::new(index % self.width, index / self.width)
    }

    pub fn state(&self, cell: CellIndex) -> CellState {
        self.cells[self.index(cell)]
    }

    pub fn contains(&self, cell: CellIndex) -> bool {
        cell.col < self.width && cell.row < self.height
    }

    fn cell_of(&self, x: f64, y: f64) -> Option<CellIndex> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let col = (x / self.cell_size).floor() as usize;
        let row = (y / self.cell_size).floor() as usize;
        let c = CellIndex::new(col, row);
        self.contains(c).then_some(c)
    }

    pub fn count(&self, state: CellState) -> usize {
        self.cells.iter().filter(|&&c| c == state).count()
    }

    /// Applies one frame of camera evidence taken at time `t`.
    ///
    /// Cells not mentioned stay as they are (unexplored cells stay unexplored);
    /// visible free cells become explored; occupied evidence wins over free
    /// evidence for the same cell; a tag detection turns the occupied cell it
    /// localizes into a robot cell. Observed obstacle cells fall back to
    /// explored after [`T_CLEAR`] seconds without occupied evidence.
    pub fn fuse_frame(&mut self, frame: &Frame, ctx: &FusionContext, t: f64) -> FuseOutcome {
        let mut faults = Vec::new();
        let n = self.cells.len();
        let mut seen = vec![false; n];
        let mut occupied = vec![false; n];

        for ev in &frame.obstacles {
            if !ctx.cameras.contains_key(&ev.camera_id) {
                if !faults.contains(&Fault::UnknownCamera(ev.camera_id)) {
                    faults.push(Fault::UnknownCamera(ev.camera_id));
                }
                continue;
            }
            if !self.contains(ev.cell) {
                faults.push(Fault::CellOutOfBounds {
                    camera_id: ev.camera_id,
                    cell: ev.cell,
                });
                continue;
            }
            let i = self.index(ev.cell);
            seen[i] = true;
            occupied[i] |= ev.occupied;
        }

        // Average each robot's detections in world coordinates.
        let mut sums: BTreeMap<u16, (f64, f64, usize)> = BTreeMap::new();
        for det in &frame.tags {
            let Some(cam) = ctx.cameras.get(&det.camera_id) else {
                if !faults.contains(&Fault::UnknownCamera(det.camera_id)) {
                    faults.push(Fault::UnknownCamera(det.camera_id));
                }
                continue;
            };
            let Some(&robot) = ctx.tag_to_robot.get(&det.tag_id) else {
                faults.push(Fault::UnknownTag {
                    camera_id: det.camera_id,
                    tag_id: det.tag_id,
                });
                continue;
            };
            let (x, y) = ground_to_world(&cam.spec, &cam.pose, det.ground_position);
            let e = sums.entry(robot).or_insert((0.0, 0.0, 0));
            e.0 += x;
            e.1 += y;
            e.2 += 1;
        }
        let mut robot_poses = BTreeMap::new();
        for (robot, (sx, sy, k)) in sums {
            let x = sx / k as f64;
            let y = sy / k as f64;
            let cell = self.snap_robot(x, y, &seen, &occupied);
            robot_poses.insert(
                robot,
                RobotEstimate {
                    x,
                    y,
                    sigma: ctx.tag_sigma / (k as f64).sqrt(),
                    cell,
                },
            );
        }
        let mut robot_cell = vec![false; n];
        for est in robot_poses.values() {
            if let Some(c) = est.cell {
                robot_cell[self.index(c)] = true;
            }
        }

        let mut changed = robot_poses != self.robot_poses;
        for i in 0..n {
            let old = self.cells[i];
            if old == CellState::Wall {
                continue;
            }
            let new = if robot_cell[i] {
                CellState::Robot
            } else if seen[i] && occupied[i] {
                if self.static_walls[i] {
                    CellState::Wall
                } else {
                    self.last_occupied[i] = t;
                    CellState::Obstacle
                }
            } else if seen[i] {
                match old {
                    CellState::Obstacle if t - self.last_occupied[i] < T_CLEAR => CellState::Obstacle,
                    _ => CellState::Explored,
                }
            } else if old == CellState::Robot {
                // Robot left for an unobserved cell; the cell was observed before.
                CellState::Explored
            } else {
                old
            };
            if new != old {
                self.cells[i] = new;
                changed = true;
            }
        }
        self.robot_poses = robot_poses;
        if changed {
            self.revision += 1;
        }
        FuseOutcome { changed, faults }
    }

    /// Robot cell for a localized tag: the occupied cell nearest to the
    /// estimate within one cell of it, else the containing cell if observed.
    fn snap_robot(&self, x: f64, y: f64, seen: &[bool], occupied: &[bool]) -> Option<CellIndex> {
        let col = (x / self.cell_size).floor() as i64;
        let row = (y / self.cell_size).floor() as i64;
        let mut best: Option<(f64, CellIndex)> = None;
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (c, r) = (col + dc, row + dr);
                if c < 0 || r < 0 || c >= self.width as i64 || r >= self.height as i64 {
                    continue;
                }
                let cell = CellIndex::new(c as usize, r as usize);
                let i = self.index(cell);
                if !(seen[i] && occupied[i]) || self.static_walls[i] {
                    continue;
                }
                let cx = (c as f64 + 0.5) * self.cell_size;
                let cy = (r as f64 + 0.5) * self.cell_size;
                let d = (cx - x).hypot(cy - y);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, cell));
                }
            }
        }
        best.map(|(_, c)| c).or_else(|| {
            self.cell_of(x, y)
                .filter(|&c| seen[self.index(c)] && !self.static_walls[self.index(c)])
        })
    }

    /// Merges a robot-contributed local map into this map by per-cell vote.
    /// Returns whether anything changed.
    pub fn merge_robot_map(&mut self, local: &GridMap, weight_fixed: u32, weight_robot: u32) -> Result<bool, FusionError> {
        if local.width != self.width || local.height != self.height || local.cell_size != self.cell_size {
            return Err(FusionError::DimensionMismatch {
                expected: (self.width, self.height, self.cell_size),
                found: (local.width, local.height, local.cell_size),
            });
        }
        let mut changed = false;
        for i in 0..self.cells.len() {
            let new = vote(self.cells[i], local.cells[i], weight_fixed, weight_robot);
            if new != self.cells[i] {
                self.cells[i] = new;
                changed = true;
            }
        }
        if changed {
            self.revision += 1;
        }
        Ok(changed)
    }

    /// Whether every robot cell belongs to an estimate and vice versa.
    pub fn robot_cells_consistent(&self) -> bool {
        let marked: Vec<CellIndex> = (0..self.cells.len())
            .filter(|&i| self.cells[i] == CellState::Robot)
            .map(|i| self.cell_at(i))
            .collect();
        let estimated: std::collections::BTreeSet<CellIndex> =
            self.robot_poses.values().filter_map(|e| e.cell).collect();
        marked.len() == estimated.len() && marked.iter().all(|c| estimated.contains(c))
    }
}

/// Per-cell consensus between the fixed-camera map (`global`) and a robot's
/// report (`local`).
///
/// An unexplored side abstains. Blind spots (unexplored in the global map)
/// take the robot's state, with a robot-reported `Robot` recorded as
/// `Obstacle` since no tag localizes it. Walls in the global map are
/// permanent. Otherwise the heavier side wins and ties go to the more
/// conservative state.
pub fn vote(global: CellState, local: CellState, weight_fixed: u32, weight_robot: u32) -> CellState {
    use CellState::*;
    match (global, local) {
        (g, Unexplored) => g,
        (Unexplored, Robot) => Obstacle,
        (Unexplored, l) => l,
        (Wall, _) => Wall,
        (g, l) if g == l => g,
        (g, l) => {
            let l = if l == Robot { Obstacle } else { l };
            let robot_wins = weight_robot > weight_fixed || (weight_robot == weight_fixed && l.severity() > g.severity());
            if robot_wins {
                l
            } else {
                g
            }
        }
    }
}

/// Functional form of [`GridMap::merge_robot_map`].
pub fn merge_robot_map(global: &GridMap, local: &GridMap, weight_fixed: u32, weight_robot: u32) -> Result<GridMap, FusionError> {
    let mut out = global.clone();
    out.merge_robot_map(local, weight_fixed, weight_robot)?;
    Ok(out)
}

/// Functional form of [`GridMap::fuse_frame`].
pub fn fuse_frame(map: &GridMap, frame: &Frame, ctx: &FusionContext, t: f64) -> (GridMap, FuseOutcome) {
    let mut out = map.clone();
    let outcome = out.fuse_frame(frame, ctx, t);
    (out, outcome)
}
