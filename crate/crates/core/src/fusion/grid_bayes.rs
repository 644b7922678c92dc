//! Histogram (grid) Bayes filter over cells × heading bins.
//!
//! Prediction convolves the belief with the motion kernel; the update
//! multiplies by the measurement likelihood and renormalizes by η. The map is
//! held fixed: wall cells carry no probability.

use nalgebra::{DVector, Vector3};
use statrs::function::erf::erfc;

use super::ekf::{MotionModel, ObservationModel};
use super::map::{CellState, GridMap};
use super::FusionError;

/// Kernel half-width in standard deviations.
const KERNEL_SIGMAS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GridBelief {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub headings: usize,
    pub probs: Vec<f64>,
    /// Normalizer applied in the last update.
    pub eta: f64,
}

impl GridBelief {
    /// Uniform over non-wall cells of `map` and all heading bins.
    pub fn uniform(map: &GridMap, headings: usize) -> Self {
        Self::from_fn(map, headings, |_, _, _| 1.0)
    }

    /// Belief proportional to `f(x, y, θ)` at bin centers, zero on walls.
    pub fn from_fn(map: &GridMap, headings: usize, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        assert!(headings >= 1);
        let mut gb = Self {
            width: map.width,
            height: map.height,
            cell_size: map.cell_size,
            headings,
            probs: vec![0.0; map.width * map.height * headings],
            eta: 1.0,
        };
        for row in 0..map.height {
            for col in 0..map.width {
                if map.cells[row * map.width + col] == CellState::Wall {
                    continue;
                }
                for h in 0..headings {
                    let (x, y, th) = gb.center(col, row, h);
                    let i = gb.index(col, row, h);
                    gb.probs[i] = f(x, y, th);
                }
            }
        }
        let total: f64 = gb.probs.iter().sum();
        gb.probs.iter_mut().for_each(|p| *p /= total);
        gb
    }

    pub fn index(&self, col: usize, row: usize, heading: usize) -> usize {
        (row * self.width + col) * self.headings + heading
    }

    pub fn heading_step(&self) -> f64 {
        std::f64::consts::TAU / self.headings as f64
    }

    pub fn center(&self, col: usize, row: usize, heading: usize) -> (f64, f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
            heading as f64 * self.heading_step(),
        )
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Marginal over cells (heading summed out), row-major.
    pub fn position_marginal(&self) -> Vec<f64> {
        self.probs.chunks(self.headings).map(|c| c.iter().sum()).collect()
    }

    pub fn mean_position(&self) -> (f64, f64) {
        let mut mx = 0.0;
        let mut my = 0.0;
        for (i, p) in self.position_marginal().into_iter().enumerate() {
            mx += p * (i % self.width) as f64;
            my += p * (i / self.width) as f64;
        }
        ((mx + 0.5) * self.cell_size, (my + 0.5) * self.cell_size)
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Weights of a Gaussian `N(mean, sigma²)` integrated over unit-spaced bins
/// `[k·step, (k+1)·step)`, returned as `(first_bin, weights)`. Zero `sigma`
/// puts all mass on the bin containing the mean.
fn bin_weights(mean: f64, sigma: f64, step: f64) -> (i64, Vec<f64>) {
    if sigma <= 0.0 {
        return ((mean / step).floor() as i64, vec![1.0]);
    }
    let lo = ((mean - KERNEL_SIGMAS * sigma) / step).floor() as i64;
    let hi = ((mean + KERNEL_SIGMAS * sigma) / step).floor() as i64;
    let weights = (lo..=hi)
        .map(|k| {
            let a = (k as f64 * step - mean) / sigma;
            let b = ((k + 1) as f64 * step - mean) / sigma;
            normal_cdf(b) - normal_cdf(a)
        })
        .collect();
    (lo, weights)
}

/// Heading bins are centered on multiples of the step, so shift by half a bin.
fn heading_weights(mean: f64, sigma: f64, step: f64, bins: usize) -> Vec<(usize, f64)> {
    if bins == 1 {
        return vec![(0, 1.0)];
    }
    let (first, w) = bin_weights(mean + step * 0.5, sigma, step);
    let mut out = vec![0.0; bins];
    for (k, weight) in w.into_iter().enumerate() {
        let b = (first + k as i64).rem_euclid(bins as i64) as usize;
        out[b] += weight;
    }
    out.into_iter().enumerate().filter(|(_, w)| *w > 0.0).collect()
}

/// Motion prediction: pushes each state's mass through the motion model and
/// spreads it with the process noise.
pub fn bayes_predict(gb: &GridBelief, u: &Vector3<f64>, mm: &impl MotionModel, map: &GridMap) -> GridBelief {
    let q = mm.process_noise();
    let (sx, sy, sth) = (q[(0, 0)].max(0.0).sqrt(), q[(1, 1)].max(0.0).sqrt(), q[(2, 2)].max(0.0).sqrt());
    let mut out = vec![0.0; gb.probs.len()];
    for row in 0..gb.height {
        for col in 0..gb.width {
            for h in 0..gb.headings {
                let p = gb.probs[gb.index(col, row, h)];
                if p == 0.0 {
                    continue;
                }
                let (x, y, th) = gb.center(col, row, h);
                let dest = mm.transition(&Vector3::new(x, y, th), u);
                let (fx, wx) = bin_weights(dest.x, sx, gb.cell_size);
                let (fy, wy) = bin_weights(dest.y, sy, gb.cell_size);
                let wh = heading_weights(dest.z, sth, gb.heading_step(), gb.headings);
                for (ky, &py) in wy.iter().enumerate() {
                    let r = fy + ky as i64;
                    if r < 0 || r >= gb.height as i64 {
                        continue;
                    }
                    for (kx, &px) in wx.iter().enumerate() {
                        let c = fx + kx as i64;
                        if c < 0 || c >= gb.width as i64 {
                            continue;
                        }
                        if map.cells[r as usize * map.width + c as usize] == CellState::Wall {
                            continue;
                        }
                        for &(hb, ph) in &wh {
                            out[gb.index(c as usize, r as usize, hb)] += p * px * py * ph;
                        }
                    }
                }
            }
        }
    }
    let total: f64 = out.iter().sum();
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    GridBelief {
        probs: out,
        ..gb.clone()
    }
}

/// One full filter step: motion prediction, then (if a measurement is given)
/// likelihood weighting and normalization.
pub fn bayes_grid_step(
    gb: &GridBelief,
    u: &Vector3<f64>,
    z: Option<&DVector<f64>>,
    mm: &impl MotionModel,
    om: &impl ObservationModel,
    map: &GridMap,
) -> Result<GridBelief, FusionError> {
    if map.width != gb.width || map.height != gb.height || map.cell_size != gb.cell_size {
        return Err(FusionError::DimensionMismatch {
            expected: (gb.width, gb.height, gb.cell_size),
            found: (map.width, map.height, map.cell_size),
        });
    }
    let mut out = bayes_predict(gb, u, mm, map);
    let Some(z) = z else {
        out.eta = 1.0;
        return Ok(out);
    };
    let r_inv = om
        .measurement_noise()
        .try_inverse()
        .ok_or(FusionError::SingularNoise)?;
    for row in 0..out.height {
        for col in 0..out.width {
            for h in 0..out.headings {
                let i = out.index(col, row, h);
                if out.probs[i] == 0.0 {
                    continue;
                }
                let (x, y, th) = out.center(col, row, h);
                let residual = z - om.measure(&Vector3::new(x, y, th));
                let d2 = (residual.transpose() * &r_inv * &residual)[(0, 0)];
                out.probs[i] *= (-0.5 * d2).exp();
            }
        }
    }
    let total: f64 = out.probs.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(FusionError::DegenerateLikelihood);
    }
    let eta = 1.0 / total;
    out.probs.iter_mut().for_each(|p| *p *= eta);
    out.eta = eta;
    Ok(out)
}
