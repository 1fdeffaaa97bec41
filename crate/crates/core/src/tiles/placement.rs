use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::layout::{DimMap, DimMode, Layout};
use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::fabric::{Axis, CoreCoord};

/// Rectangle of cores anchored at the mesh origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    /// Cores along X (columns).
    pub nx: usize,
    /// Cores along Y (rows).
    pub ny: usize,
}

impl GridShape {
    pub const fn new(nx: usize, ny: usize) -> Self {
        Self { nx, ny }
    }

    pub const fn square(n: usize) -> Self {
        Self { nx: n, ny: n }
    }

    pub fn along(&self, axis: Axis) -> usize {
        match axis {
            Axis::X => self.nx,
            Axis::Y => self.ny,
        }
    }

    pub fn cores(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_square(&self) -> bool {
        self.nx == self.ny
    }

    /// Row-major iteration: `(0,0), (1,0), ..., (nx-1, ny-1)`.
    pub fn iter(&self) -> impl Iterator<Item = CoreCoord> + '_ {
        (0..self.ny).flat_map(move |y| (0..self.nx).map(move |x| CoreCoord::new(x, y)))
    }

    pub fn index(&self, c: CoreCoord) -> usize {
        c.y * self.nx + c.x
    }

    pub fn contains(&self, c: CoreCoord) -> bool {
        c.x < self.nx && c.y < self.ny
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.nx, self.ny)
    }
}

/// How one matrix dimension is cut across the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DimCut {
    /// Partition axis, if any.
    axis: Option<Axis>,
    parts: usize,
    extent: usize,
    block: usize,
}

impl DimCut {
    fn new(dim: &DimMap, extent: usize, grid: GridShape, what: &str) -> Result<Self> {
        match dim.partitioned_on() {
            Some(axis) => {
                let parts = grid.along(axis);
                if extent < parts {
                    return Err(Error::Shape(format!(
                        "{what}: dimension {} has extent {extent}, fewer than the {parts} cores on axis {axis}",
                        dim.name
                    )));
                }
                Ok(Self { axis: Some(axis), parts, extent, block: extent.div_ceil(parts) })
            }
            None => Ok(Self { axis: None, parts: 1, extent, block: extent }),
        }
    }

    fn index(&self, c: CoreCoord) -> usize {
        self.axis.map_or(0, |a| c.along(a))
    }

    fn padded(&self) -> usize {
        self.block * self.parts
    }
}

/// One named tensor spread over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedTensor {
    pub layout: Layout,
    /// Unpadded global shape.
    pub rows: usize,
    pub cols: usize,
    row_cut: DimCut,
    col_cut: DimCut,
    tiles: Vec<Option<Matrix>>,
}

impl PlacedTensor {
    pub fn tile_shape(&self) -> (usize, usize) {
        (self.row_cut.block, self.col_cut.block)
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        (self.row_cut.padded(), self.col_cut.padded())
    }

    /// Global `(row, col)` offset of the tile held by `c`.
    pub fn tile_origin(&self, c: CoreCoord) -> (usize, usize) {
        (self.row_cut.index(c) * self.row_cut.block, self.col_cut.index(c) * self.col_cut.block)
    }
}

/// Tiles of named tensors per core, with per-core byte accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    grid: GridShape,
    mem_budget: Option<u64>,
    tensors: BTreeMap<String, PlacedTensor>,
    bytes: Vec<u64>,
}

impl Placement {
    pub fn new(grid: GridShape, mem_budget: Option<u64>) -> Self {
        Self { grid, mem_budget, tensors: BTreeMap::new(), bytes: vec![0; grid.cores()] }
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    /// Places `tensor` per `layout`, zero-padding partitioned dimensions up
    /// to a multiple of the core count on their axis.
    pub fn insert(&mut self, name: &str, tensor: &Matrix, layout: &Layout) -> Result<()> {
        layout.validate()?;
        let (rdim, cdim) = layout.matrix_dims()?;
        for axis in [Axis::X, Axis::Y] {
            if self.grid.along(axis) > 1 && rdim.axis != Some(axis) && cdim.axis != Some(axis) {
                return Err(Error::Shape(format!(
                    "{name}: layout {layout} leaves axis {axis} of the {} grid unassigned",
                    self.grid
                )));
            }
        }
        if self.tensors.contains_key(name) {
            self.remove(name);
        }
        let row_cut = DimCut::new(rdim, tensor.rows(), self.grid, name)?;
        let col_cut = DimCut::new(cdim, tensor.cols(), self.grid, name)?;
        let mut tiles = Vec::with_capacity(self.grid.cores());
        let mut added = vec![0u64; self.grid.cores()];
        for c in self.grid.iter() {
            let r0 = row_cut.index(c) * row_cut.block;
            let c0 = col_cut.index(c) * col_cut.block;
            let t = tensor.block(r0, c0, row_cut.block, col_cut.block);
            added[self.grid.index(c)] = t.bytes();
            tiles.push(Some(t));
        }
        if let Some(budget) = self.mem_budget {
            for c in self.grid.iter() {
                let i = self.grid.index(c);
                let needed = self.bytes[i] + added[i];
                if needed > budget {
                    return Err(Error::Capacity {
                        core: c,
                        needed,
                        budget,
                        what: format!("placing {name} as {layout}"),
                    });
                }
            }
        }
        for (b, a) in self.bytes.iter_mut().zip(added) {
            *b += a;
        }
        self.tensors.insert(
            name.to_string(),
            PlacedTensor {
                layout: layout.clone(),
                rows: tensor.rows(),
                cols: tensor.cols(),
                row_cut,
                col_cut,
                tiles,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<PlacedTensor> {
        let t = self.tensors.remove(name)?;
        for (i, tile) in t.tiles.iter().enumerate() {
            if let Some(tile) = tile {
                self.bytes[i] -= tile.bytes();
            }
        }
        Some(t)
    }

    pub fn tensor(&self, name: &str) -> Option<&PlacedTensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tile(&self, name: &str, c: CoreCoord) -> Option<&Matrix> {
        let t = self.tensors.get(name)?;
        if !self.grid.contains(c) {
            return None;
        }
        t.tiles[self.grid.index(c)].as_ref()
    }

    /// Drops one tile, leaving the placement incomplete.
    pub fn take_tile(&mut self, name: &str, c: CoreCoord) -> Option<Matrix> {
        let i = self.grid.index(c);
        let t = self.tensors.get_mut(name)?.tiles[i].take()?;
        self.bytes[i] -= t.bytes();
        Some(t)
    }

    pub fn bytes_at(&self, c: CoreCoord) -> u64 {
        self.bytes[self.grid.index(c)]
    }

    pub fn peak_bytes(&self) -> u64 {
        self.bytes.iter().copied().max().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes.iter().sum()
    }

    /// Reassembles the global tensor and strips padding.
    pub fn gather(&self, name: &str) -> Result<Matrix> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("no tensor named {name} in placement")))?;
        let (pr, pc) = t.padded_shape();
        let mut out = Matrix::zeros(pr, pc);
        for c in self.grid.iter() {
            // replicas: read the copy at index 0 of each replicated axis
            let canonical = t
                .row_cut
                .axis
                .iter()
                .chain(t.col_cut.axis.iter())
                .fold(CoreCoord::new(0, 0), |acc, &a| match a {
                    Axis::X => CoreCoord::new(c.x, acc.y),
                    Axis::Y => CoreCoord::new(acc.x, c.y),
                });
            if canonical != c {
                continue;
            }
            let tile = t.tiles[self.grid.index(c)].as_ref().ok_or_else(|| {
                Error::Integrity(format!("{name}: tile missing at core {c}"))
            })?;
            let (r0, c0) = t.tile_origin(c);
            out.write_block(r0, c0, tile);
        }
        Ok(out.block(0, 0, t.rows, t.cols))
    }

    /// Checks that every replica equals the copy it was made from.
    pub fn replicas_consistent(&self, name: &str) -> Result<bool> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Integrity(format!("no tensor named {name} in placement")))?;
        let mut seen: BTreeMap<(usize, usize), &Matrix> = BTreeMap::new();
        for c in self.grid.iter() {
            let tile = t.tiles[self.grid.index(c)]
                .as_ref()
                .ok_or_else(|| Error::Integrity(format!("{name}: tile missing at core {c}")))?;
            let key = (t.row_cut.index(c), t.col_cut.index(c));
            if let Some(prev) = seen.insert(key, tile) {
                if prev != tile {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

/// Places one tensor on a fresh grid.
pub fn partition(
    name: &str,
    tensor: &Matrix,
    grid: GridShape,
    layout: &Layout,
    mem_budget: Option<u64>,
) -> Result<Placement> {
    let mut p = Placement::new(grid, mem_budget);
    p.insert(name, tensor, layout)?;
    Ok(p)
}

pub fn gather(p: &Placement, name: &str) -> Result<Matrix> {
    p.gather(name)
}

/// Column dimension partitioned on the other axis, row dimension replicated
/// along `axis`. For a `1 x E` activation and `axis = X` this is `E_yL^x`.
pub fn replicate(
    name: &str,
    tensor: &Matrix,
    grid: GridShape,
    axis: Axis,
    mem_budget: Option<u64>,
) -> Result<Placement> {
    let layout = replicated_layout(axis);
    partition(name, tensor, grid, &layout, mem_budget)
}

pub fn replicated_layout(axis: Axis) -> Layout {
    Layout {
        dims: vec![
            DimMap { name: "L".into(), axis: Some(axis), mode: DimMode::Replicated },
            DimMap::part("E", axis.other()),
        ],
    }
}
