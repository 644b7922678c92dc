//! Ground-truth simulated environment: the cell grid, walls, obstacles,
//! robots, landmarks and fixed camera descriptions, plus the geometric
//! queries (ground footprints, coverage, occlusion) evaluated against it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::geom::Point3;

/// Tolerance on the footprint rectangle boundary, in meters.
const FOOTPRINT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub col: usize,
    pub row: usize,
}

impl CellIndex {
    pub fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Free,
    Wall,
}

/// Planar robot pose `(x, y, θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Robot {
    pub id: u16,
    pub pose: Pose2,
    pub tag: u32,
    /// Scripted forward speed in m/s; zero keeps the robot parked.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub id: u32,
    pub cell: CellIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub id: u32,
    pub position: Point3,
}

/// Fixed depth camera: ground position, mounting height, yaw and field of view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub yaw: f64,
    pub hfov: f64,
    pub vfov: f64,
    pub max_range: f64,
}

impl CameraSpec {
    pub fn validate(&self) -> Result<(), String> {
        let pi = std::f64::consts::PI;
        let finite = [self.x, self.y, self.height, self.yaw, self.hfov, self.vfov, self.max_range]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(format!("camera {}: non-finite parameter", self.id));
        }
        if self.height <= 0.0 {
            return Err(format!("camera {}: height must be positive", self.id));
        }
        if !(self.hfov > 0.0 && self.hfov < pi) {
            return Err(format!("camera {}: hfov must lie in (0, 180) degrees", self.id));
        }
        if !(self.vfov > 0.0 && self.vfov < pi) {
            return Err(format!("camera {}: vfov must lie in (0, 180) degrees", self.id));
        }
        if self.max_range <= 0.0 {
            return Err(format!("camera {}: range must be positive", self.id));
        }
        Ok(())
    }
}

/// Ground-plane rectangle seen by a camera: `width` across, `depth` forward
/// from the camera's ground point, rotated by `yaw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundFootprint {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub depth: f64,
    pub width: f64,
}

impl GroundFootprint {
    /// Expresses a world ground point in the footprint frame: `(lateral, forward)`.
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        (dx * c + dy * s, -dx * s + dy * c)
    }

    pub fn to_world(&self, lateral: f64, forward: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + lateral * c - forward * s, self.y + lateral * s + forward * c)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (lx, ly) = self.to_local(px, py);
        let half = self.width * 0.5;
        lx >= -half - FOOTPRINT_EPS
            && lx <= half + FOOTPRINT_EPS
            && ly >= -FOOTPRINT_EPS
            && ly <= self.depth + FOOTPRINT_EPS
    }
}

pub fn ground_footprint(cam: &CameraSpec) -> GroundFootprint {
    let depth = (cam.height * (cam.vfov * 0.5).tan()).min(cam.max_range);
    let width = 2.0 * cam.height * (cam.hfov * 0.5).tan();
    GroundFootprint {
        x: cam.x,
        y: cam.y,
        yaw: cam.yaw,
        depth,
        width,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<CellKind>,
    pub obstacles: Vec<Obstacle>,
    pub robots: Vec<Robot>,
    pub landmarks: Vec<Landmark>,
}

impl GridWorld {
    pub fn new(width: usize, height: usize, cell_size: f64) -> Self {
        Self {
            cell_size,
            width,
            height,
            cells: vec![CellKind::Free; width * height],
            obstacles: Vec::new(),
            robots: Vec::new(),
            landmarks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index(&self, cell: CellIndex) -> usize {
        cell.row * self.width + cell.col
    }

    pub fn cell_at(&self, index: usize) -> CellIndex {
        CellIndex::new(index % self.width, index / self.width)
    }

    pub fn kind(&self, cell: CellIndex) -> CellKind {
        self.cells[self.index(cell)]
    }

    pub fn is_wall(&self, cell: CellIndex) -> bool {
        self.kind(cell) == CellKind::Wall
    }

    pub fn set_wall(&mut self, cell: CellIndex) {
        let i = self.index(cell);
        self.cells[i] = CellKind::Wall;
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * self.cell_size, self.height as f64 * self.cell_size)
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        let (w, h) = self.extent();
        x >= 0.0 && y >= 0.0 && x <= w && y <= h
    }

    /// Cell containing a ground point; points on the far border map to the
    /// last row/column.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<CellIndex> {
        if !self.in_bounds(x, y) {
            return None;
        }
        let col = ((x / self.cell_size).floor() as usize).min(self.width - 1);
        let row = ((y / self.cell_size).floor() as usize).min(self.height - 1);
        Some(CellIndex::new(col, row))
    }

    pub fn cell_center(&self, cell: CellIndex) -> (f64, f64) {
        (
            (cell.col as f64 + 0.5) * self.cell_size,
            (cell.row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn free_cells(&self) -> BTreeSet<CellIndex> {
        (0..self.len())
            .filter(|&i| self.cells[i] == CellKind::Free)
            .map(|i| self.cell_at(i))
            .collect()
    }

    /// Copy with every wall removed (entities kept).
    pub fn without_walls(&self) -> GridWorld {
        let mut w = self.clone();
        w.cells.iter_mut().for_each(|c| *c = CellKind::Free);
        w
    }

    pub fn robot_cell(&self, robot: &Robot) -> Option<CellIndex> {
        self.cell_of(robot.pose.x, robot.pose.y)
    }

    /// Cells occupied by obstacles or robots.
    pub fn occupied_cells(&self) -> BTreeSet<CellIndex> {
        let mut out: BTreeSet<CellIndex> = self.obstacles.iter().map(|o| o.cell).collect();
        out.extend(self.robots.iter().filter_map(|r| self.robot_cell(r)));
        out
    }

    /// Cells crossed by the segment `a → b` (supercover: a segment passing
    /// exactly through a cell corner includes both side cells).
    pub fn traverse(&self, a: (f64, f64), b: (f64, f64)) -> Vec<CellIndex> {
        let cs = self.cell_size;
        let (ax, ay) = (a.0 / cs, a.1 / cs);
        let (bx, by) = (b.0 / cs, b.1 / cs);
        let clamp = |v: f64, n: usize| -> i64 { (v.floor() as i64).clamp(0, n as i64 - 1) };
        let mut cx = clamp(ax, self.width);
        let mut cy = clamp(ay, self.height);
        let end = (clamp(bx, self.width), clamp(by, self.height));

        let dx = bx - ax;
        let dy = by - ay;
        let step_x: i64 = if dx > 0.0 { 1 } else if dx < 0.0 { -1 } else { 0 };
        let step_y: i64 = if dy > 0.0 { 1 } else if dy < 0.0 { -1 } else { 0 };
        let first_boundary = |c: i64, step: i64, origin: f64, delta: f64| -> f64 {
            match step {
                1 => ((c + 1) as f64 - origin) / delta,
                -1 => (c as f64 - origin) / delta,
                _ => f64::INFINITY,
            }
        };
        let mut t_max_x = first_boundary(cx, step_x, ax, dx);
        let mut t_max_y = first_boundary(cy, step_y, ay, dy);
        let t_delta_x = if step_x != 0 { 1.0 / dx.abs() } else { f64::INFINITY };
        let t_delta_y = if step_y != 0 { 1.0 / dy.abs() } else { f64::INFINITY };

        let mut out = vec![CellIndex::new(cx as usize, cy as usize)];
        let in_grid = |x: i64, y: i64| x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64;
        while (cx, cy) != end {
            let t = t_max_x.min(t_max_y);
            if t > 1.0 {
                break;
            }
            if (t_max_x - t_max_y).abs() < 1e-12 {
                // Corner crossing: both side cells are touched.
                for (x, y) in [(cx + step_x, cy), (cx, cy + step_y)] {
                    if in_grid(x, y) {
                        out.push(CellIndex::new(x as usize, y as usize));
                    }
                }
                cx += step_x;
                cy += step_y;
                t_max_x += t_delta_x;
                t_max_y += t_delta_y;
            } else if t_max_x < t_max_y {
                cx += step_x;
                t_max_x += t_delta_x;
            } else {
                cy += step_y;
                t_max_y += t_delta_y;
            }
            if !in_grid(cx, cy) {
                break;
            }
            out.push(CellIndex::new(cx as usize, cy as usize));
        }
        out
    }

    /// True iff the segment `a → b` crosses no wall cell.
    pub fn line_of_sight(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        self.traverse(a, b).into_iter().all(|c| !self.is_wall(c))
    }

    /// Like [`line_of_sight`](Self::line_of_sight) towards the center of
    /// `target`, but the target cell itself may be a wall (its face is seen).
    pub fn cell_visible_from(&self, from: (f64, f64), target: CellIndex) -> bool {
        let center = self.cell_center(target);
        self.traverse(from, center)
            .into_iter()
            .filter(|&c| c != target)
            .all(|c| !self.is_wall(c))
    }
}

pub fn line_of_sight(world: &GridWorld, a: (f64, f64), b: (f64, f64)) -> bool {
    world.line_of_sight(a, b)
}

/// Cells whose centers fall inside the camera footprint and are visible from
/// the camera's ground point.
pub fn covered_cells(cam: &CameraSpec, world: &GridWorld) -> BTreeSet<CellIndex> {
    let fp = ground_footprint(cam);
    (0..world.len())
        .map(|i| world.cell_at(i))
        .filter(|&c| {
            let (cx, cy) = world.cell_center(c);
            fp.contains(cx, cy) && world.line_of_sight((cam.x, cam.y), (cx, cy))
        })
        .collect()
}

/// Footprint cells the camera can see, wall faces included.
pub fn visible_footprint_cells(cam: &CameraSpec, world: &GridWorld) -> Vec<CellIndex> {
    let fp = ground_footprint(cam);
    (0..world.len())
        .map(|i| world.cell_at(i))
        .filter(|&c| {
            let (cx, cy) = world.cell_center(c);
            fp.contains(cx, cy) && world.cell_visible_from((cam.x, cam.y), c)
        })
        .collect()
}

/// Simulation parameters from the `sim` section.
#[derive(Debug, Clone, PartialEq)]
pub struct SimParams {
    pub seed: u64,
    pub noise_sigma: f64,
    pub odom_sigma: f64,
    pub net_latency_ms: f64,
    pub net_jitter_ms: f64,
    pub net_loss: f64,
    pub broadcast_period_ms: f64,
    pub upload_period_ms: f64,
    pub robot_sense_radius: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_sigma: 0.0,
            odom_sigma: 0.0,
            net_latency_ms: 0.0,
            net_jitter_ms: 0.0,
            net_loss: 0.0,
            broadcast_period_ms: 100.0,
            upload_period_ms: 500.0,
            robot_sense_radius: 1.0,
        }
    }
}

/// Placement settings from the optional `plan` section.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanParams {
    pub min_overlap: u32,
    pub max_overlap: u32,
    pub budget: usize,
    /// Spacing of generated lattice candidates in meters; zero disables.
    pub lattice_step: f64,
    pub lattice_height: f64,
    pub lattice_hfov: f64,
    pub lattice_vfov: f64,
    pub lattice_range: f64,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            min_overlap: 0,
            max_overlap: u32::MAX,
            budget: usize::MAX,
            lattice_step: 0.0,
            lattice_height: 2.0,
            lattice_hfov: 60f64.to_radians(),
            lattice_vfov: 60f64.to_radians(),
            lattice_range: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub world: GridWorld,
    pub cameras: Vec<CameraSpec>,
    pub sim: SimParams,
    pub plan: PlanParams,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {message}")]
    Semantic { line: usize, message: String },
}

impl ScenarioError {
    pub fn line(&self) -> usize {
        match self {
            ScenarioError::Syntax { line, .. } | ScenarioError::Semantic { line, .. } => *line,
        }
    }
}

fn syntax(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Syntax {
        line,
        message: message.into(),
    }
}

fn semantic(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Semantic {
        line,
        message: message.into(),
    }
}

/// Key/value block collected from one `section ... end`.
struct Block {
    name: String,
    line: usize,
    entries: BTreeMap<String, (usize, String)>,
    rows: Vec<(usize, String)>,
}

impl Block {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ScenarioError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| syntax(line, format!("invalid value for `{key}`: `{raw}`"))),
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, ScenarioError> {
        let line = self.line;
        let name = self.name.clone();
        self.num(key)?
            .ok_or_else(|| semantic(line, format!("section `{name}` is missing `{key}`")))
    }

    /// Angle given either as `<stem>_deg` or `<stem>_rad`, returned in radians.
    fn angle(&mut self, stem: &str) -> Result<Option<f64>, ScenarioError> {
        let deg: Option<f64> = self.num(&format!("{stem}_deg"))?;
        let rad: Option<f64> = self.num(&format!("{stem}_rad"))?;
        match (deg, rad) {
            (Some(_), Some(_)) => Err(semantic(self.line, format!("both `{stem}_deg` and `{stem}_rad` given"))),
            (Some(d), None) => Ok(Some(d.to_radians())),
            (None, r) => Ok(r),
        }
    }

    fn finish(self) -> Result<(), ScenarioError> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(syntax(line, format!("unknown key `{key}` in section `{}`", self.name)));
        }
        Ok(())
    }
}

fn split_blocks(document: &str) -> Result<Vec<Block>, ScenarioError> {
    let mut blocks = Vec::new();
    let mut current: Option<Block> = None;
    for (i, raw) in document.lines().enumerate() {
        let line_no = i + 1;
        if !raw.is_ascii() {
            return Err(syntax(line_no, "non-ASCII character"));
        }
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let head = words.next().unwrap_or("");
        match (head, current.as_mut()) {
            ("section", None) => {
                let name = words.next().ok_or_else(|| syntax(line_no, "section without a name"))?;
                if words.next().is_some() {
                    return Err(syntax(line_no, "trailing text after section name"));
                }
                current = Some(Block {
                    name: name.to_string(),
                    line: line_no,
                    entries: BTreeMap::new(),
                    rows: Vec::new(),
                });
            }
            ("section", Some(_)) => return Err(syntax(line_no, "nested section (missing `end`)")),
            ("end", Some(_)) => {
                if words.next().is_some() {
                    return Err(syntax(line_no, "trailing text after `end`"));
                }
                blocks.push(current.take().expect("open block"));
            }
            ("end", None) => return Err(syntax(line_no, "`end` without an open section")),
            (_, None) => return Err(syntax(line_no, "content outside of a section")),
            (_, Some(block)) => {
                if let Some((key, value)) = line.split_once('=') {
                    let key = key.trim();
                    let value = value.trim();
                    if key.is_empty() || key.contains(char::is_whitespace) || value.is_empty() {
                        return Err(syntax(line_no, "malformed `key = value` pair"));
                    }
                    if block.entries.insert(key.to_string(), (line_no, value.to_string())).is_some() {
                        return Err(syntax(line_no, format!("duplicate key `{key}`")));
                    }
                } else {
                    block.rows.push((line_no, line.to_string()));
                }
            }
        }
    }
    if let Some(block) = current {
        return Err(syntax(block.line, format!("section `{}` is never closed", block.name)));
    }
    Ok(blocks)
}

fn parse_range(line: usize, text: &str) -> Result<(usize, usize), ScenarioError> {
    let (a, b) = text
        .split_once("..")
        .ok_or_else(|| syntax(line, format!("expected `<start>..<end>`, got `{text}`")))?;
    let a = a.parse().map_err(|_| syntax(line, format!("invalid range start `{a}`")))?;
    let b = b.parse().map_err(|_| syntax(line, format!("invalid range end `{b}`")))?;
    if a > b {
        return Err(semantic(line, format!("empty range {a}..{b}")));
    }
    Ok((a, b))
}

/// Parses a scenario document. Unknown sections and keys are rejected.
pub fn parse_scenario(document: &str) -> Result<Scenario, ScenarioError> {
    let blocks = split_blocks(document)?;

    let mut world_block = None;
    for block in &blocks {
        if block.name == "world" {
            if world_block.is_some() {
                return Err(semantic(block.line, "duplicate `world` section"));
            }
            world_block = Some(block.line);
        }
    }
    if world_block.is_none() {
        return Err(semantic(1, "missing `world` section"));
    }

    let mut world: Option<GridWorld> = None;
    let mut cameras = Vec::new();
    let mut sim: Option<SimParams> = None;
    let mut plan: Option<PlanParams> = None;
    let mut pending = Vec::new();

    for mut block in blocks {
        if block.name != "world" {
            pending.push(block);
            continue;
        }
        if let Some((line, _)) = block.rows.first() {
            return Err(syntax(*line, "expected `key = value`"));
        }
        let cell_size: f64 = block.required("cell_size")?;
        let width: usize = block.required("width")?;
        let height: usize = block.required("height")?;
        if !(cell_size > 0.0 && cell_size.is_finite()) || width == 0 || height == 0 {
            return Err(semantic(block.line, "world dimensions must be positive"));
        }
        block.finish()?;
        world = Some(GridWorld::new(width, height, cell_size));
    }
    let mut world = world.expect("world section checked above");

    let mut robot_lines = Vec::new();
    let mut obstacle_lines = Vec::new();
    let mut camera_lines = Vec::new();
    let mut landmark_lines = Vec::new();

    for mut block in pending {
        let line = block.line;
        if block.name != "walls" {
            if let Some((l, _)) = block.rows.first() {
                return Err(syntax(*l, "expected `key = value`"));
            }
        }
        match block.name.as_str() {
            "walls" => {
                if let Some((_, (l, _))) = block.entries.iter().next() {
                    return Err(syntax(*l, "walls section takes `row <r> <c0>..<c1>` lines"));
                }
                for (l, text) in &block.rows {
                    let parts: Vec<&str> = text.split_whitespace().collect();
                    if parts.len() != 3 || parts[0] != "row" {
                        return Err(syntax(*l, format!("expected `row <r> <c0>..<c1>`, got `{text}`")));
                    }
                    let r: usize = parts[1].parse().map_err(|_| syntax(*l, format!("invalid row `{}`", parts[1])))?;
                    let (c0, c1) = parse_range(*l, parts[2])?;
                    if r >= world.height || c1 >= world.width {
                        return Err(semantic(*l, "wall outside world bounds"));
                    }
                    for c in c0..=c1 {
                        world.set_wall(CellIndex::new(c, r));
                    }
                }
            }
            "camera" => {
                let cam = CameraSpec {
                    id: block.required("id")?,
                    x: block.required("x")?,
                    y: block.required("y")?,
                    height: block.required("h")?,
                    yaw: block.angle("yaw")?.ok_or_else(|| semantic(line, "camera is missing `yaw_deg`"))?,
                    hfov: block.angle("hfov")?.ok_or_else(|| semantic(line, "camera is missing `hfov_deg`"))?,
                    vfov: block.angle("vfov")?.ok_or_else(|| semantic(line, "camera is missing `vfov_deg`"))?,
                    max_range: block.required("range")?,
                };
                block.finish()?;
                cameras.push(cam);
                camera_lines.push(line);
            }
            "robot" => {
                let robot = Robot {
                    id: block.required("id")?,
                    pose: Pose2::new(
                        block.required("x")?,
                        block.required("y")?,
                        block.angle("yaw")?.unwrap_or(0.0),
                    ),
                    tag: block.required("tag")?,
                    speed: block.num("speed")?.unwrap_or(0.0),
                };
                block.finish()?;
                world.robots.push(robot);
                robot_lines.push(line);
            }
            "obstacle" => {
                let id: u32 = block.required("id")?;
                let x: f64 = block.required("x")?;
                let y: f64 = block.required("y")?;
                block.finish()?;
                let cell = world
                    .cell_of(x, y)
                    .ok_or_else(|| semantic(line, format!("obstacle {id} outside world bounds")))?;
                world.obstacles.push(Obstacle { id, cell });
                obstacle_lines.push(line);
            }
            "landmark" => {
                let lm = Landmark {
                    id: block.required("id")?,
                    position: Point3::new(block.required("x")?, block.required("y")?, block.required("z")?),
                };
                block.finish()?;
                world.landmarks.push(lm);
                landmark_lines.push(line);
            }
            "sim" => {
                if sim.is_some() {
                    return Err(semantic(line, "duplicate `sim` section"));
                }
                let d = SimParams::default();
                let params = SimParams {
                    seed: block.num("seed")?.unwrap_or(d.seed),
                    noise_sigma: block.num("noise_sigma")?.unwrap_or(d.noise_sigma),
                    odom_sigma: block.num("odom_sigma")?.unwrap_or(d.odom_sigma),
                    net_latency_ms: block.num("net_latency_ms")?.unwrap_or(d.net_latency_ms),
                    net_jitter_ms: block.num("net_jitter_ms")?.unwrap_or(d.net_jitter_ms),
                    net_loss: block.num("net_loss")?.unwrap_or(d.net_loss),
                    broadcast_period_ms: block.num("broadcast_period_ms")?.unwrap_or(d.broadcast_period_ms),
                    upload_period_ms: block.num("upload_period_ms")?.unwrap_or(d.upload_period_ms),
                    robot_sense_radius: block.num("robot_sense_radius")?.unwrap_or(d.robot_sense_radius),
                };
                block.finish()?;
                if params.noise_sigma < 0.0 || params.odom_sigma < 0.0 {
                    return Err(semantic(line, "noise sigmas must be non-negative"));
                }
                if !(0.0..=1.0).contains(&params.net_loss) {
                    return Err(semantic(line, "net_loss must lie in [0, 1]"));
                }
                if params.net_latency_ms < 0.0 || params.net_jitter_ms < 0.0 {
                    return Err(semantic(line, "latency and jitter must be non-negative"));
                }
                if params.broadcast_period_ms <= 0.0 || params.upload_period_ms <= 0.0 {
                    return Err(semantic(line, "periods must be positive"));
                }
                sim = Some(params);
            }
            "plan" => {
                if plan.is_some() {
                    return Err(semantic(line, "duplicate `plan` section"));
                }
                let d = PlanParams::default();
                let params = PlanParams {
                    min_overlap: block.num("min_overlap")?.unwrap_or(d.min_overlap),
                    max_overlap: block.num("max_overlap")?.unwrap_or(d.max_overlap),
                    budget: block.num("budget")?.unwrap_or(d.budget),
                    lattice_step: block.num("lattice_step")?.unwrap_or(d.lattice_step),
                    lattice_height: block.num("lattice_h")?.unwrap_or(d.lattice_height),
                    lattice_hfov: block.angle("lattice_hfov")?.unwrap_or(d.lattice_hfov),
                    lattice_vfov: block.angle("lattice_vfov")?.unwrap_or(d.lattice_vfov),
                    lattice_range: block.num("lattice_range")?.unwrap_or(d.lattice_range),
                };
                block.finish()?;
                if params.min_overlap > params.max_overlap || params.max_overlap == 0 || params.budget == 0 {
                    return Err(semantic(line, "plan requires min_overlap <= max_overlap, max_overlap >= 1, budget >= 1"));
                }
                plan = Some(params);
            }
            other => return Err(syntax(line, format!("unknown section `{other}`"))),
        }
    }

    for (cam, &line) in cameras.iter().zip(&camera_lines) {
        cam.validate().map_err(|m| semantic(line, m))?;
        if !world.in_bounds(cam.x, cam.y) {
            return Err(semantic(line, format!("camera {} outside world bounds", cam.id)));
        }
    }
    for (robot, &line) in world.robots.iter().zip(&robot_lines) {
        let cell = world
            .robot_cell(robot)
            .ok_or_else(|| semantic(line, format!("robot {} outside world bounds", robot.id)))?;
        if world.is_wall(cell) {
            return Err(semantic(line, format!("robot {} placed on a wall cell", robot.id)));
        }
    }
    for (obstacle, &line) in world.obstacles.iter().zip(&obstacle_lines) {
        if world.is_wall(obstacle.cell) {
            return Err(semantic(line, format!("obstacle {} placed on a wall cell", obstacle.id)));
        }
    }
    for (lm, &line) in world.landmarks.iter().zip(&landmark_lines) {
        let p = lm.position;
        if !world.in_bounds(p.x, p.y) || p.z < 0.0 || !p.z.is_finite() {
            return Err(semantic(line, format!("landmark {} outside world bounds", lm.id)));
        }
    }
    check_unique(cameras.iter().map(|c| c.id as u64), &camera_lines, "camera")?;
    check_unique(world.robots.iter().map(|r| r.id as u64), &robot_lines, "robot")?;
    check_unique(world.robots.iter().map(|r| r.tag as u64), &robot_lines, "robot tag")?;
    check_unique(world.obstacles.iter().map(|o| o.id as u64), &obstacle_lines, "obstacle")?;
    check_unique(world.landmarks.iter().map(|l| l.id as u64), &landmark_lines, "landmark")?;

    Ok(Scenario {
        world,
        cameras,
        sim: sim.unwrap_or_default(),
        plan: plan.unwrap_or_default(),
    })
}

fn check_unique(ids: impl Iterator<Item = u64>, lines: &[usize], what: &str) -> Result<(), ScenarioError> {
    let mut seen = BTreeSet::new();
    for (id, &line) in ids.zip(lines) {
        if !seen.insert(id) {
            return Err(semantic(line, format!("duplicate {what} id {id}")));
        }
    }
    Ok(())
}

/// Writes a canonical document that [`parse_scenario`] maps back to an
/// identical scenario. Angles are emitted in radians so the round trip is exact.
pub fn serialize_scenario(scenario: &Scenario) -> String {
    let w = &scenario.world;
    let mut out = String::new();
    let _ = writeln!(out, "section world\ncell_size = {}\nwidth = {}\nheight = {}\nend", w.cell_size, w.width, w.height);

    let mut wall_rows = String::new();
    for row in 0..w.height {
        let mut col = 0;
        while col < w.width {
            if w.is_wall(CellIndex::new(col, row)) {
                let start = col;
                while col + 1 < w.width && w.is_wall(CellIndex::new(col + 1, row)) {
                    col += 1;
                }
                let _ = writeln!(wall_rows, "row {row} {start}..{col}");
            }
            col += 1;
        }
    }
    if !wall_rows.is_empty() {
        let _ = write!(out, "section walls\n{wall_rows}end\n");
    }
    for c in &scenario.cameras {
        let _ = writeln!(
            out,
            "section camera\nid = {}\nx = {}\ny = {}\nh = {}\nyaw_rad = {}\nhfov_rad = {}\nvfov_rad = {}\nrange = {}\nend",
            c.id, c.x, c.y, c.height, c.yaw, c.hfov, c.vfov, c.max_range
        );
    }
    for r in &w.robots {
        let _ = writeln!(
            out,
            "section robot\nid = {}\nx = {}\ny = {}\nyaw_rad = {}\ntag = {}\nspeed = {}\nend",
            r.id, r.pose.x, r.pose.y, r.pose.theta, r.tag, r.speed
        );
    }
    for o in &w.obstacles {
        let (x, y) = w.cell_center(o.cell);
        let _ = writeln!(out, "section obstacle\nid = {}\nx = {x}\ny = {y}\nend", o.id);
    }
    for l in &w.landmarks {
        let _ = writeln!(
            out,
            "section landmark\nid = {}\nx = {}\ny = {}\nz = {}\nend",
            l.id, l.position.x, l.position.y, l.position.z
        );
    }
    let s = &scenario.sim;
    let _ = writeln!(
        out,
        "section sim\nseed = {}\nnoise_sigma = {}\nodom_sigma = {}\nnet_latency_ms = {}\nnet_jitter_ms = {}\nnet_loss = {}\nbroadcast_period_ms = {}\nupload_period_ms = {}\nrobot_sense_radius = {}\nend",
        s.seed, s.noise_sigma, s.odom_sigma, s.net_latency_ms, s.net_jitter_ms, s.net_loss,
        s.broadcast_period_ms, s.upload_period_ms, s.robot_sense_radius
    );
    let p = &scenario.plan;
    let _ = writeln!(
        out,
        "section plan\nmin_overlap = {}\nmax_overlap = {}\nbudget = {}\nlattice_step = {}\nlattice_h = {}\nlattice_hfov_rad = {}\nlattice_vfov_rad = {}\nlattice_range = {}\nend",
        p.min_overlap, p.max_overlap, p.budget, p.lattice_step, p.lattice_height, p.lattice_hfov,
        p.lattice_vfov, p.lattice_range
    );
    out
}
