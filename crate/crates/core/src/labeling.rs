//! Connected-component labelling on boolean cell grids (8-connectivity).

use serde::{Deserialize, Serialize};

/// A cell on a slide grid, in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

impl GridCoord {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// True when the two cells touch by edge or corner.
    pub fn is_8_adjacent(&self, other: &GridCoord) -> bool {
        self != other && self.row.abs_diff(other.row) <= 1 && self.col.abs_diff(other.col) <= 1
    }
}

/// Row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl BoolGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![false; rows * cols] }
    }

    pub fn get(&self, c: GridCoord) -> bool {
        self.cells[c.row * self.cols + c.col]
    }

    pub fn set(&mut self, c: GridCoord, v: bool) {
        self.cells[c.row * self.cols + c.col] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn iter_set(&self) -> impl Iterator<Item = GridCoord> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| GridCoord::new(i / self.cols, i % self.cols))
    }
}

/// Returns the 8-connected components of the set cells. Each component is
/// sorted row-major, and components are ordered by their first cell.
pub fn components_8(grid: &BoolGrid) -> Vec<Vec<GridCoord>> {
    let (rows, cols) = (grid.rows, grid.cols);
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..rows * cols {
        if !grid.cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            comp.push(GridCoord::new(r, c));
            for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                    let j = nr * cols + nc;
                    if grid.cells[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// True when `cells` forms a single 8-connected component.
pub fn is_connected_8(cells: &[GridCoord]) -> bool {
    if cells.is_empty() {
        return false;
    }
    let rows = cells.iter().map(|c| c.row).max().unwrap() + 1;
    let cols = cells.iter().map(|c| c.col).max().unwrap() + 1;
    let mut grid = BoolGrid::new(rows, cols);
    for &c in cells {
        grid.set(c, true);
    }
    components_8(&grid).len() == 1
}
