//! Multi-camera extrinsic calibration from landmarks shared between
//! overlapping cameras.
//!
//! Conventions: an edge `(i, j)` stores `T_ij`, the pose of camera `j` in
//! camera `i`'s frame, so `T_ij · p_j ≈ p_i` for a landmark seen by both.
//! Global poses map a camera frame into the reference frame and compose along
//! paths: `G_k = G_i · T_ij · T_jk`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geom::{exp_so3, skew, Mat3, Point3, RigidTransform, Vec3};
use crate::sensim::LandmarkObservation;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("reference camera {0} is not in the graph")]
    UnknownReference(u32),
    #[error("graph is disconnected; unreachable cameras: {0:?}")]
    Disconnected(Vec<u32>),
    #[error("no initial pose for camera {0}")]
    MissingPose(u32),
    #[error("duplicate edge between cameras {0} and {1}")]
    DuplicateEdge(u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub p_i: Point3,
    pub p_j: Point3,
    pub landmark_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub camera_i: u32,
    pub camera_j: u32,
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    /// Pairs landmarks that both cameras observed, by landmark id.
    pub fn from_observations(camera_i: u32, camera_j: u32, obs_i: &[LandmarkObservation], obs_j: &[LandmarkObservation]) -> Self {
        let by_id: BTreeMap<u32, &LandmarkObservation> = obs_j.iter().map(|o| (o.landmark_id, o)).collect();
        let mut pairs: Vec<Correspondence> = obs_i
            .iter()
            .filter_map(|a| {
                by_id.get(&a.landmark_id).map(|b| Correspondence {
                    p_i: a.point,
                    p_j: b.point,
                    landmark_id: Some(a.landmark_id),
                })
            })
            .collect();
        pairs.sort_by_key(|p| p.landmark_id);
        Self { camera_i, camera_j, pairs }
    }

    /// Same landmarks with the roles of the cameras exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            camera_i: self.camera_j,
            camera_j: self.camera_i,
            pairs: self
                .pairs
                .iter()
                .map(|p| Correspondence {
                    p_i: p.p_j,
                    p_j: p.p_i,
                    landmark_id: p.landmark_id,
                })
                .collect(),
        }
    }
}

/// Point with an optional identity, as input to [`icp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggedPoint {
    pub point: Point3,
    pub id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpOptions {
    pub max_iterations: usize,
    /// Stop once the RMS residual changes by less than this, in meters.
    pub convergence_threshold: f64,
    pub use_known_ids: bool,
}

impl Default for IcpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_threshold: 1e-9,
            use_known_ids: true,
        }
    }
}

fn rms_residual(t: &RigidTransform, pairs: &[(Point3, Point3)]) -> f64 {
    let sum: f64 = pairs.iter().map(|(a, b)| (t.apply(a) - b).norm_squared()).sum();
    (sum / pairs.len() as f64).sqrt()
}

/// Rejects point sets whose spread is (numerically) at most one-dimensional.
fn check_spread(points: impl Iterator<Item = Point3>, which: &str) -> Result<(), CalibError> {
    let pts: Vec<Point3> = points.collect();
    let centroid = pts.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords) / pts.len() as f64;
    let mut scatter = Mat3::zeros();
    for p in &pts {
        let d = p.coords - centroid;
        scatter += d * d.transpose();
    }
    let mut eig: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    if eig[0] <= 1e-24 || eig[1] <= 1e-12 * eig[0] {
        return Err(CalibError::Degenerate(format!("{which} points are collinear or coincident")));
    }
    Ok(())
}

/// Least-squares rigid transform with `T·p_i ≈ p_j` (centroids,
/// cross-covariance, SVD with reflection correction). Returns the transform
/// and its RMS residual.
pub fn best_rigid_transform(c: &CorrespondenceSet) -> Result<(RigidTransform, f64), CalibError> {
    let pairs: Vec<(Point3, Point3)> = c.pairs.iter().map(|p| (p.p_i, p.p_j)).collect();
    fit_pairs(&pairs)
}

fn fit_pairs(pairs: &[(Point3, Point3)]) -> Result<(RigidTransform, f64), CalibError> {
    if pairs.len() < 3 {
        return Err(CalibError::TooFewPoints(pairs.len()));
    }
    if pairs.iter().any(|(a, b)| !(a.coords.iter().chain(b.coords.iter()).all(|v| v.is_finite()))) {
        return Err(CalibError::Degenerate("non-finite coordinates".into()));
    }
    check_spread(pairs.iter().map(|p| p.0), "source")?;
    check_spread(pairs.iter().map(|p| p.1), "target")?;

    let n = pairs.len() as f64;
    let ci = pairs.iter().fold(Vec3::zeros(), |acc, (a, _)| acc + a.coords) / n;
    let cj = pairs.iter().fold(Vec3::zeros(), |acc, (_, b)| acc + b.coords) / n;
    let mut h = Mat3::zeros();
    for (a, b) in pairs {
        h += (a.coords - ci) * (b.coords - cj).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let mut d = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let t = RigidTransform {
        rotation,
        translation: cj - rotation * ci,
    };
    let rms = rms_residual(&t, pairs);
    Ok((t, rms))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rms: f64,
    pub iterations: usize,
    /// RMS residual after each accepted iteration.
    pub residuals: Vec<f64>,
    /// Final correspondences as `(source, target, id)`.
    pub matches: Vec<Correspondence>,
}

fn match_points(
    source: &[TaggedPoint],
    target: &[TaggedPoint],
    t: &RigidTransform,
    by_id: bool,
) -> Vec<Correspondence> {
    if by_id {
        let index: BTreeMap<u32, &TaggedPoint> = target.iter().filter_map(|p| p.id.map(|id| (id, p))).collect();
        return source
            .iter()
            .filter_map(|s| {
                let id = s.id?;
                index.get(&id).map(|q| Correspondence {
                    p_i: s.point,
                    p_j: q.point,
                    landmark_id: Some(id),
                })
            })
            .collect();
    }
    source
        .iter()
        .map(|s| {
            let moved = t.apply(&s.point);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, q) in target.iter().enumerate() {
                let d = (q.point - moved).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            Correspondence {
                p_i: s.point,
                p_j: target[best].point,
                landmark_id: s.id.filter(|id| target[best].id == Some(*id)),
            }
        })
        .collect()
}

/// Iterative closest point aligning `source` onto `target` (`T·source ≈
/// target`), starting from the identity.
///
/// Matching is by id when `use_known_ids` is set and every point carries one,
/// nearest-neighbor otherwise (ties to the lowest target index). Stops when the
/// RMS residual changes by less than the threshold, when a step would increase
/// it, or after `max_iterations`.
pub fn icp(source: &[TaggedPoint], target: &[TaggedPoint], opts: &IcpOptions) -> Result<IcpResult, CalibError> {
    icp_from(source, target, opts, RigidTransform::identity())
}

pub fn icp_from(
    source: &[TaggedPoint],
    target: &[TaggedPoint],
    opts: &IcpOptions,
    initial: RigidTransform,
) -> Result<IcpResult, CalibError> {
    if source.len() < 3 || target.len() < 3 {
        return Err(CalibError::TooFewPoints(source.len().min(target.len())));
    }
    let by_id = opts.use_known_ids
        && source.iter().all(|p| p.id.is_some())
        && target.iter().all(|p| p.id.is_some());
    let mut t = initial;
    let mut matches = match_points(source, target, &t, by_id);
    let pairs = |m: &[Correspondence]| -> Vec<(Point3, Point3)> { m.iter().map(|c| (c.p_i, c.p_j)).collect() };
    if matches.len() < 3 {
        return Err(CalibError::TooFewPoints(matches.len()));
    }
    let mut prev = rms_residual(&t, &pairs(&matches));
    let mut residuals = Vec::new();
    let mut iterations = 0;
    for _ in 0..opts.max_iterations.max(1) {
        iterations += 1;
        let (candidate, rms) = fit_pairs(&pairs(&matches))?;
        if rms > prev + 1e-15 && !residuals.is_empty() {
            break;
        }
        t = candidate;
        residuals.push(rms);
        let delta = (prev - rms).abs();
        prev = rms;
        if delta < opts.convergence_threshold {
            break;
        }
        let next = match_points(source, target, &t, by_id);
        if next == matches {
            break;
        }
        matches = next;
    }
    Ok(IcpResult {
        transform: t,
        rms: prev,
        iterations,
        residuals,
        matches,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub i: u32,
    pub j: u32,
    /// Pose of camera `j` in camera `i`'s frame.
    pub transform: RigidTransform,
    /// Matched landmarks, `p_i` in camera `i`, `p_j` in camera `j`.
    pub correspondences: CorrespondenceSet,
    /// RMS residual in meters.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformGraph {
    pub nodes: Vec<u32>,
    pub edges: Vec<GraphEdge>,
    pub reference: u32,
    /// Pairs whose estimation failed, with the reason.
    pub failures: Vec<(u32, u32, CalibError)>,
}

impl TransformGraph {
    /// Neighbors of each node as `(neighbor, edge index, forward)`, sorted by
    /// neighbor id. `forward` is true when the node is the edge's `i`.
    fn adjacency(&self) -> BTreeMap<u32, Vec<(u32, usize, bool)>> {
        let mut adj: BTreeMap<u32, Vec<(u32, usize, bool)>> = self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for (k, e) in self.edges.iter().enumerate() {
            adj.entry(e.i).or_default().push((e.j, k, true));
            adj.entry(e.j).or_default().push((e.i, k, false));
        }
        for list in adj.values_mut() {
            list.sort();
        }
        adj
    }

    /// Breadth-first spanning tree from the reference: `(parent, child, edge index)`.
    pub fn spanning_tree(&self) -> Vec<(u32, u32, usize)> {
        let adj = self.adjacency();
        let mut seen = BTreeSet::from([self.reference]);
        let mut queue = VecDeque::from([self.reference]);
        let mut tree = Vec::new();
        while let Some(node) = queue.pop_front() {
            for &(next, edge, _) in adj.get(&node).map(Vec::as_slice).unwrap_or(&[]) {
                if seen.insert(next) {
                    tree.push((node, next, edge));
                    queue.push_back(next);
                }
            }
        }
        tree
    }
}

/// Estimates one edge per camera pair by ICP. Failed pairs are listed in
/// `failures` instead of producing an edge.
pub fn build_graph(pairwise: &[CorrespondenceSet], opts: &IcpOptions, reference: u32) -> Result<TransformGraph, CalibError> {
    let mut nodes = BTreeSet::new();
    for c in pairwise {
        nodes.insert(c.camera_i);
        nodes.insert(c.camera_j);
    }
    if !nodes.contains(&reference) {
        return Err(CalibError::UnknownReference(reference));
    }
    let mut edges: Vec<GraphEdge> = Vec::new();
    let mut failures = Vec::new();
    let mut linked = BTreeSet::new();
    for c in pairwise {
        let key = (c.camera_i.min(c.camera_j), c.camera_i.max(c.camera_j));
        if c.camera_i == c.camera_j {
            failures.push((c.camera_i, c.camera_j, CalibError::Degenerate("self edge".into())));
            continue;
        }
        if linked.contains(&key) {
            failures.push((c.camera_i, c.camera_j, CalibError::DuplicateEdge(c.camera_i, c.camera_j)));
            continue;
        }
        // T_ij maps camera j's points onto camera i's.
        let source: Vec<TaggedPoint> = c.pairs.iter().map(|p| TaggedPoint { point: p.p_j, id: p.landmark_id }).collect();
        let target: Vec<TaggedPoint> = c.pairs.iter().map(|p| TaggedPoint { point: p.p_i, id: p.landmark_id }).collect();
        match icp(&source, &target, opts) {
            Ok(res) => {
                linked.insert(key);
                let pairs = res
                    .matches
                    .iter()
                    .map(|m| Correspondence {
                        p_i: m.p_j,
                        p_j: m.p_i,
                        landmark_id: m.landmark_id,
                    })
                    .collect();
                edges.push(GraphEdge {
                    i: c.camera_i,
                    j: c.camera_j,
                    transform: res.transform,
                    correspondences: CorrespondenceSet {
                        camera_i: c.camera_i,
                        camera_j: c.camera_j,
                        pairs,
                    },
                    residual: res.rms,
                });
            }
            Err(e) => failures.push((c.camera_i, c.camera_j, e)),
        }
    }
    Ok(TransformGraph {
        nodes: nodes.into_iter().collect(),
        edges,
        reference,
        failures,
    })
}

/// Global pose of every camera, composing edge transforms along a
/// breadth-first spanning tree rooted at the reference.
pub fn propagate(graph: &TransformGraph) -> Result<BTreeMap<u32, RigidTransform>, CalibError> {
    if !graph.nodes.contains(&graph.reference) {
        return Err(CalibError::UnknownReference(graph.reference));
    }
    let mut poses = BTreeMap::from([(graph.reference, RigidTransform::identity())]);
    for (parent, child, edge) in graph.spanning_tree() {
        let e = &graph.edges[edge];
        let step = if e.i == parent { e.transform } else { e.transform.inverse() };
        let pose = poses[&parent].compose(&step);
        poses.insert(child, pose);
    }
    let unreachable: Vec<u32> = graph.nodes.iter().copied().filter(|n| !poses.contains_key(n)).collect();
    if !unreachable.is_empty() {
        return Err(CalibError::Disconnected(unreachable));
    }
    Ok(poses)
}

/// Per-edge disagreement between the measured `T_ij` and the one implied by
/// the global poses: `(i, j, rotation error rad, translation error m)`.
pub fn edge_errors(graph: &TransformGraph, poses: &BTreeMap<u32, RigidTransform>) -> Vec<(u32, u32, f64, f64)> {
    graph
        .edges
        .iter()
        .filter_map(|e| {
            let (gi, gj) = (poses.get(&e.i)?, poses.get(&e.j)?);
            let implied = gi.inverse().compose(gj);
            Some((
                e.i,
                e.j,
                crate::geom::rotation_distance(&implied, &e.transform),
                (implied.translation - e.transform.translation).norm(),
            ))
        })
        .collect()
}

/// Total matching cost `C = Σ_edges Σ_k ‖T_ij p_j − p_i‖²` with
/// `T_ij = G_i⁻¹ G_j`, evaluated as `‖G_j p_j − G_i p_i‖²`.
pub fn global_cost(graph: &TransformGraph, poses: &BTreeMap<u32, RigidTransform>) -> Result<f64, CalibError> {
    let mut cost = 0.0;
    for e in &graph.edges {
        let gi = poses.get(&e.i).ok_or(CalibError::MissingPose(e.i))?;
        let gj = poses.get(&e.j).ok_or(CalibError::MissingPose(e.j))?;
        for p in &e.correspondences.pairs {
            cost += (gj.apply(&p.p_j) - gi.apply(&p.p_i)).norm_squared();
        }
    }
    Ok(cost)
}

/// Free (non-reference) nodes in parameter order.
fn free_nodes(graph: &TransformGraph) -> Vec<u32> {
    graph.nodes.iter().copied().filter(|&n| n != graph.reference).collect()
}

/// Applies a parameter increment: 6 entries per free node, `(ω, δt)`, with
/// `R ← exp(ω)·R` and `t ← t + δt`.
pub fn apply_increment(
    graph: &TransformGraph,
    poses: &BTreeMap<u32, RigidTransform>,
    delta: &DVector<f64>,
) -> BTreeMap<u32, RigidTransform> {
    let mut out = poses.clone();
    for (k, node) in free_nodes(graph).into_iter().enumerate() {
        let omega = Vec3::new(delta[6 * k], delta[6 * k + 1], delta[6 * k + 2]);
        let dt = Vec3::new(delta[6 * k + 3], delta[6 * k + 4], delta[6 * k + 5]);
        let g = out.get_mut(&node).expect("pose checked by caller");
        g.rotation = exp_so3(&omega) * g.rotation;
        g.translation += dt;
    }
    out
}

/// Stacked residuals and their Jacobian with respect to the increment of
/// [`apply_increment`], at zero increment.
fn linearize(graph: &TransformGraph, poses: &BTreeMap<u32, RigidTransform>) -> (DVector<f64>, DMatrix<f64>) {
    let free: BTreeMap<u32, usize> = free_nodes(graph).into_iter().enumerate().map(|(k, n)| (n, k)).collect();
    let rows: usize = graph.edges.iter().map(|e| 3 * e.correspondences.pairs.len()).sum();
    let mut r = DVector::zeros(rows);
    let mut jac = DMatrix::zeros(rows, 6 * free.len());
    let mut row = 0;
    for e in &graph.edges {
        let gi = &poses[&e.i];
        let gj = &poses[&e.j];
        for p in &e.correspondences.pairs {
            let wi = gi.rotation * p.p_i.coords;
            let wj = gj.rotation * p.p_j.coords;
            let res = (wj + gj.translation) - (wi + gi.translation);
            r.fixed_rows_mut::<3>(row).copy_from(&res);
            if let Some(&k) = free.get(&e.j) {
                jac.fixed_view_mut::<3, 3>(row, 6 * k).copy_from(&(-skew(&wj)));
                jac.fixed_view_mut::<3, 3>(row, 6 * k + 3).copy_from(&Mat3::identity());
            }
            if let Some(&k) = free.get(&e.i) {
                jac.fixed_view_mut::<3, 3>(row, 6 * k).copy_from(&skew(&wi));
                jac.fixed_view_mut::<3, 3>(row, 6 * k + 3).copy_from(&(-Mat3::identity()));
            }
            row += 3;
        }
    }
    (r, jac)
}

/// Analytic gradient of [`global_cost`] with respect to the increment
/// parameters of [`apply_increment`].
pub fn cost_gradient(graph: &TransformGraph, poses: &BTreeMap<u32, RigidTransform>) -> Result<DVector<f64>, CalibError> {
    check_poses(graph, poses)?;
    let (r, jac) = linearize(graph, poses);
    Ok(jac.transpose() * r * 2.0)
}

fn check_poses(graph: &TransformGraph, poses: &BTreeMap<u32, RigidTransform>) -> Result<(), CalibError> {
    match graph.nodes.iter().find(|n| !poses.contains_key(n)) {
        Some(&n) => Err(CalibError::MissingPose(n)),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub poses: BTreeMap<u32, RigidTransform>,
    /// Cost before refinement followed by the cost after each accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
}

pub const REFINE_MAX_ITERATIONS: usize = 50;
const GRADIENT_TOL: f64 = 1e-10;
const RELATIVE_COST_TOL: f64 = 1e-12;
const LAMBDA_MAX: f64 = 1e16;

/// Levenberg–Marquardt refinement of all global poses except the reference,
/// minimizing [`global_cost`]. Only cost-decreasing steps are accepted.
pub fn refine(graph: &TransformGraph, initial: &BTreeMap<u32, RigidTransform>) -> Result<RefineResult, CalibError> {
    check_poses(graph, initial)?;
    let mut poses = initial.clone();
    let mut cost = global_cost(graph, &poses)?;
    let mut trace = vec![cost];
    let n = 6 * free_nodes(graph).len();
    let mut iterations = 0;
    if n == 0 {
        return Ok(RefineResult {
            poses,
            cost_trace: trace,
            iterations,
        });
    }
    let mut lambda = 1e-3;
    while iterations < REFINE_MAX_ITERATIONS {
        iterations += 1;
        let (r, jac) = linearize(graph, &poses);
        let g = jac.transpose() * &r;
        if (2.0 * &g).amax() < GRADIENT_TOL {
            break;
        }
        let h = jac.transpose() * &jac;
        let mut accepted = false;
        while lambda < LAMBDA_MAX {
            let mut damped = h.clone();
            for d in 0..n {
                damped[(d, d)] += lambda;
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = apply_increment(graph, &poses, &step);
            let trial_cost = global_cost(graph, &trial)?;
            if trial_cost < cost {
                let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
                poses = trial;
                cost = trial_cost;
                trace.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel < RELATIVE_COST_TOL {
                    return Ok(RefineResult {
                        poses,
                        cost_trace: trace,
                        iterations,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(RefineResult {
        poses,
        cost_trace: trace,
        iterations,
    })
}
