//! Binary portable-pixmap (P6) rendering of occupancy maps.

use ubimap_core::fusion::{CellState, GridMap};

pub fn color(state: CellState) -> [u8; 3] {
    match state {
        CellState::Wall => [0, 0, 0],
        CellState::Unexplored => [96, 96, 96],
        CellState::Explored => [200, 200, 200],
        CellState::Obstacle => [220, 0, 0],
        CellState::Robot => [0, 200, 0],
    }
}

fn ppm(width: usize, height: usize, pixels: impl Iterator<Item = [u8; 3]>) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in pixels {
        out.extend_from_slice(&px);
    }
    out
}

/// One pixel per cell, row-major from row 0.
pub fn render_map(map: &GridMap) -> Vec<u8> {
    ppm(map.width, map.height, map.cells.iter().map(|&s| color(s)))
}

/// Camera multiplicity per cell: walls black, uncovered dark gray, covered
/// cells in blue growing brighter with each additional camera.
pub fn render_heatmap(width: usize, height: usize, walls: &[bool], multiplicity: &[u32]) -> Vec<u8> {
    let px = (0..width * height).map(|i| {
        if walls[i] {
            [0, 0, 0]
        } else if multiplicity[i] == 0 {
            [96, 96, 96]
        } else {
            let level = (60 + 50 * multiplicity[i].min(4)) as u8;
            [0, level / 2, level]
        }
    });
    ppm(width, height, px)
}
