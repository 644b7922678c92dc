//! Camera placement: choose a subset of candidate cameras maximizing the
//! number of covered target cells under per-cell overlap bounds `m ≤ n ≤ k`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::world::{covered_cells, CameraSpec, CellIndex, GridWorld};

/// Largest number of subsets [`plan_exhaustive`] will enumerate.
pub const EXHAUSTIVE_SUBSET_CAP: u64 = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum CoverageError {
    #[error("invalid coverage problem: {0}")]
    InvalidProblem(String),
    #[error("no candidate cameras")]
    NoCandidates,
    #[error("problem too large for exhaustive search: {subsets} subsets exceeds the cap of {cap}")]
    TooLarge { subsets: u64, cap: u64 },
}

#[derive(Debug, Clone)]
pub struct CoverageProblem {
    pub world: GridWorld,
    pub candidates: Vec<CameraSpec>,
    pub target_cells: BTreeSet<CellIndex>,
    pub min_overlap: u32,
    pub max_overlap: u32,
    pub budget: usize,
    footprints: Vec<Vec<usize>>,
}

impl CoverageProblem {
    pub fn new(
        world: GridWorld,
        candidates: Vec<CameraSpec>,
        target_cells: Option<BTreeSet<CellIndex>>,
        min_overlap: u32,
        max_overlap: u32,
        budget: usize,
    ) -> Result<Self, CoverageError> {
        if min_overlap > max_overlap {
            return Err(CoverageError::InvalidProblem(format!(
                "min_overlap {min_overlap} exceeds max_overlap {max_overlap}"
            )));
        }
        if max_overlap < 1 {
            return Err(CoverageError::InvalidProblem("max_overlap must be at least 1".into()));
        }
        if budget < 1 {
            return Err(CoverageError::InvalidProblem("budget must be at least 1".into()));
        }
        for c in &candidates {
            c.validate().map_err(CoverageError::InvalidProblem)?;
        }
        let ids: BTreeSet<u32> = candidates.iter().map(|c| c.id).collect();
        if ids.len() != candidates.len() {
            return Err(CoverageError::InvalidProblem("duplicate candidate ids".into()));
        }
        let target_cells = target_cells.unwrap_or_else(|| world.free_cells());
        if let Some(c) = target_cells.iter().find(|c| c.col >= world.width || c.row >= world.height) {
            return Err(CoverageError::InvalidProblem(format!("target cell {c:?} outside world")));
        }
        let target_index: BTreeMap<CellIndex, usize> =
            target_cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let footprints = candidates
            .iter()
            .map(|cam| {
                covered_cells(cam, &world)
                    .into_iter()
                    .filter_map(|c| target_index.get(&c).copied())
                    .collect()
            })
            .collect();
        Ok(Self {
            world,
            candidates,
            target_cells,
            min_overlap,
            max_overlap,
            budget,
            footprints,
        })
    }

    /// Unconstrained problem: all free cells, `m = 0`, no overlap cap, budget
    /// equal to the candidate count.
    pub fn unconstrained(world: GridWorld, candidates: Vec<CameraSpec>) -> Result<Self, CoverageError> {
        let budget = candidates.len().max(1);
        Self::new(world, candidates, None, 0, u32::MAX, budget)
    }

    fn index_of(&self, id: u32) -> Option<usize> {
        self.candidates.iter().position(|c| c.id == id)
    }

    /// Target cells seen by candidate `i`, as positions in the ordered target set.
    pub fn footprint(&self, i: usize) -> &[usize] {
        &self.footprints[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementPlan {
    pub selected: Vec<u32>,
    pub covered: BTreeSet<CellIndex>,
    pub per_cell_multiplicity: BTreeMap<CellIndex, u32>,
    pub coverage_ratio: f64,
    pub violations: Vec<(CellIndex, u32)>,
}

impl PlacementPlan {
    /// Builds the plan for the given candidate ids. Unknown ids are ignored.
    pub fn from_selection(problem: &CoverageProblem, ids: &[u32]) -> PlacementPlan {
        let cams: Vec<CameraSpec> = ids
            .iter()
            .filter_map(|&id| problem.index_of(id).map(|i| problem.candidates[i].clone()))
            .collect();
        let mut per_cell_multiplicity = BTreeMap::new();
        for cam in &cams {
            for cell in covered_cells(cam, &problem.world) {
                *per_cell_multiplicity.entry(cell).or_insert(0) += 1;
            }
        }
        let covered: BTreeSet<CellIndex> = per_cell_multiplicity.keys().copied().collect();
        let coverage_ratio = if problem.target_cells.is_empty() {
            1.0
        } else {
            covered.intersection(&problem.target_cells).count() as f64 / problem.target_cells.len() as f64
        };
        let mut plan = PlacementPlan {
            selected: cams.iter().map(|c| c.id).collect(),
            covered,
            per_cell_multiplicity,
            coverage_ratio,
            violations: Vec::new(),
        };
        plan.violations = check_overlap(&plan, problem);
        plan
    }

    pub fn multiplicity(&self, cell: CellIndex) -> u32 {
        self.per_cell_multiplicity.get(&cell).copied().unwrap_or(0)
    }

    /// Number of target cells per multiplicity value.
    pub fn histogram(&self, problem: &CoverageProblem) -> BTreeMap<u32, usize> {
        let mut h = BTreeMap::new();
        for &cell in &problem.target_cells {
            *h.entry(self.multiplicity(cell)).or_insert(0) += 1;
        }
        h
    }

    /// Target cells covered fewer than `m` times.
    pub fn under_covered(&self, problem: &CoverageProblem) -> Vec<CellIndex> {
        self.violations
            .iter()
            .filter(|(_, n)| *n < problem.min_overlap)
            .map(|(c, _)| *c)
            .collect()
    }
}

/// Union of the covered cells of every selected camera.
pub fn total_coverage(selected: &[CameraSpec], world: &GridWorld) -> BTreeSet<CellIndex> {
    selected.iter().flat_map(|cam| covered_cells(cam, world)).collect()
}

/// `Σ_j min(1, Σ_i cov_i(s_j))` over the target cells.
pub fn objective(plan: &PlacementPlan, problem: &CoverageProblem) -> f64 {
    problem
        .target_cells
        .iter()
        .map(|c| plan.multiplicity(*c).min(1) as f64)
        .sum()
}

/// Target cells whose multiplicity lies outside `[m, k]`.
pub fn check_overlap(plan: &PlacementPlan, problem: &CoverageProblem) -> Vec<(CellIndex, u32)> {
    problem
        .target_cells
        .iter()
        .map(|&c| (c, plan.multiplicity(c)))
        .filter(|&(_, n)| n < problem.min_overlap || n > problem.max_overlap)
        .collect()
}

fn fits(problem: &CoverageProblem, mult: &[u32], i: usize) -> bool {
    problem.footprint(i).iter().all(|&t| mult[t] < problem.max_overlap)
}

/// Greedy max-coverage selection, followed by a repair pass that spends any
/// remaining budget on cells below the minimum overlap.
pub fn plan_greedy(problem: &CoverageProblem) -> Result<PlacementPlan, CoverageError> {
    if problem.candidates.is_empty() {
        return Err(CoverageError::NoCandidates);
    }
    let n_target = problem.target_cells.len();
    let mut mult = vec![0u32; n_target];
    let mut chosen = vec![false; problem.candidates.len()];
    let mut order = Vec::new();
    let mut covered = 0usize;

    let pick = |mult: &[u32], chosen: &[bool], score: &dyn Fn(&[u32], usize) -> usize| -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for (i, &taken) in chosen.iter().enumerate() {
            if taken || !fits(problem, mult, i) {
                continue;
            }
            let gain = score(mult, i);
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        best
    };

    let marginal = |mult: &[u32], i: usize| problem.footprint(i).iter().filter(|&&t| mult[t] == 0).count();
    while order.len() < problem.budget && covered < n_target {
        match pick(&mult, &chosen, &marginal) {
            Some((i, gain)) if gain > 0 => {
                for &t in problem.footprint(i) {
                    mult[t] += 1;
                }
                covered += gain;
                chosen[i] = true;
                order.push(i);
            }
            _ => break,
        }
    }

    if problem.min_overlap > 0 {
        let m = problem.min_overlap;
        let deficit = |mult: &[u32], i: usize| problem.footprint(i).iter().filter(|&&t| mult[t] < m).count();
        while order.len() < problem.budget {
            match pick(&mult, &chosen, &deficit) {
                Some((i, gain)) if gain > 0 => {
                    for &t in problem.footprint(i) {
                        mult[t] += 1;
                    }
                    chosen[i] = true;
                    order.push(i);
                }
                _ => break,
            }
        }
    }

    let ids: Vec<u32> = order.iter().map(|&i| problem.candidates[i].id).collect();
    Ok(PlacementPlan::from_selection(problem, &ids))
}

/// Number of subsets of size `0..=budget` drawn from `n` candidates,
/// saturating at `u64::MAX`.
pub fn subset_count(n: usize, budget: usize) -> u64 {
    let mut total: u64 = 0;
    let mut c: u128 = 1;
    for s in 0..=budget.min(n) {
        if s > 0 {
            c = c * (n - s + 1) as u128 / s as u128;
        }
        total = total.saturating_add(c.min(u64::MAX as u128) as u64);
    }
    total
}

struct Search<'a> {
    problem: &'a CoverageProblem,
    mult: Vec<u32>,
    covered: usize,
    stack: Vec<usize>,
    best: Option<(usize, Vec<u32>)>,
    max_size: usize,
}

impl Search<'_> {
    fn consider(&mut self) {
        let mut ids: Vec<u32> = self.stack.iter().map(|&i| self.problem.candidates[i].id).collect();
        ids.sort_unstable();
        let better = match &self.best {
            None => true,
            Some((obj, best_ids)) => {
                self.covered > *obj
                    || (self.covered == *obj
                        && (ids.len() < best_ids.len() || (ids.len() == best_ids.len() && ids < *best_ids)))
            }
        };
        if better {
            self.best = Some((self.covered, ids));
        }
    }

    fn descend(&mut self, start: usize) {
        self.consider();
        if self.stack.len() == self.max_size {
            return;
        }
        for i in start..self.problem.candidates.len() {
            // Supersets of an over-covered subset stay over-covered.
            if !fits(self.problem, &self.mult, i) {
                continue;
            }
            for &t in self.problem.footprint(i) {
                if self.mult[t] == 0 {
                    self.covered += 1;
                }
                self.mult[t] += 1;
            }
            self.stack.push(i);
            self.descend(i + 1);
            self.stack.pop();
            for &t in self.problem.footprint(i) {
                self.mult[t] -= 1;
                if self.mult[t] == 0 {
                    self.covered -= 1;
                }
            }
        }
    }
}

/// Optimal plan by enumerating every subset within budget whose multiplicity
/// never exceeds `k`. Ties prefer fewer cameras, then the smallest sorted id list.
pub fn plan_exhaustive(problem: &CoverageProblem) -> Result<PlacementPlan, CoverageError> {
    if problem.candidates.is_empty() {
        return Err(CoverageError::NoCandidates);
    }
    let n = problem.candidates.len();
    let subsets = subset_count(n, problem.budget);
    if n > 20 || subsets > EXHAUSTIVE_SUBSET_CAP {
        return Err(CoverageError::TooLarge {
            subsets,
            cap: EXHAUSTIVE_SUBSET_CAP,
        });
    }
    let mut search = Search {
        problem,
        mult: vec![0; problem.target_cells.len()],
        covered: 0,
        stack: Vec::new(),
        best: None,
        max_size: problem.budget.min(n),
    };
    search.descend(0);
    let (_, ids) = search.best.expect("empty subset is always feasible");
    Ok(PlacementPlan::from_selection(problem, &ids))
}

/// Candidate cameras on a square lattice of ground positions, eight yaw
/// angles each, restricted to free cells. Ids count up from 1.
pub fn candidate_lattice(
    world: &GridWorld,
    step: f64,
    height: f64,
    hfov: f64,
    vfov: f64,
    max_range: f64,
) -> Vec<CameraSpec> {
    let mut out = Vec::new();
    if step <= 0.0 {
        return out;
    }
    let (w, h) = world.extent();
    let mut id = 1;
    let mut y = step * 0.5;
    while y < h {
        let mut x = step * 0.5;
        while x < w {
            if world.cell_of(x, y).is_some_and(|c| !world.is_wall(c)) {
                for k in 0..8 {
                    out.push(CameraSpec {
                        id,
                        x,
                        y,
                        height,
                        yaw: (k as f64 * 45.0).to_radians(),
                        hfov,
                        vfov,
                        max_range,
                    });
                    id += 1;
                }
            }
            x += step;
        }
        y += step;
    }
    out
}
