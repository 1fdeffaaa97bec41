//! Placement of the KV cache on the mesh during decode.
//!
//! Each generated token contributes one chunk per mesh column (that column's
//! slice of K and V). Columns therefore evolve identically and the state keeps
//! one stack of chunks per core.
//!
//! * **Concat**: every chunk goes to the last row. One core per column fills
//!   up while the rest of the mesh stays empty.
//! * **Shift**: chunks enter at the last row. Rows form a staircase: the
//!   lowest `r` rows hold one chunk more than the rest. An insertion into a
//!   mesh with `r > 0` makes every row of the fuller block pass its oldest
//!   chunk to the row above, which grows the block by one row; with `r = 0`
//!   the new chunk simply stays at the bottom. The spread never exceeds one.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::{CoreCoord, PlmrConfig, StepCost};
use crate::report::{SimReport, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvMode {
    Concat,
    Shift,
}

impl std::str::FromStr for KvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" => Ok(KvMode::Concat),
            "shift" => Ok(KvMode::Shift),
            other => Err(Error::Config(format!("unknown KV cache mode {other:?}"))),
        }
    }
}

/// One token's K and V slice held by one core.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvChunk {
    pub token: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvMeshState {
    width: usize,
    height: usize,
    capacity: usize,
    chunk_bytes: u64,
    mode: KvMode,
    /// Chunk stacks of one column, top row first; all columns are identical.
    rows: Vec<VecDeque<KvChunk>>,
    tokens: usize,
    last_moves: Vec<(CoreCoord, CoreCoord)>,
}

impl KvMeshState {
    /// `capacity` is the number of chunks one core can hold.
    pub fn new(width: usize, height: usize, capacity: usize, chunk_bytes: u64, mode: KvMode) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("KV mesh needs at least one core".into()));
        }
        Ok(Self {
            width,
            height,
            capacity,
            chunk_bytes,
            mode,
            rows: vec![VecDeque::new(); height],
            tokens: 0,
            last_moves: Vec::new(),
        })
    }

    /// Capacity derived from the per-core memory left after `reserved_bytes`
    /// of weights and activations.
    pub fn from_config(config: &PlmrConfig, reserved_bytes: u64, chunk_bytes: u64, mode: KvMode) -> Result<Self> {
        if chunk_bytes == 0 {
            return Err(Error::Config("KV chunk size must be positive".into()));
        }
        let free = config.mem_per_core.saturating_sub(reserved_bytes);
        Self::new(config.width, config.height, (free / chunk_bytes) as usize, chunk_bytes, mode)
    }

    pub fn mode(&self) -> KvMode {
        self.mode
    }

    pub fn capacity_per_core(&self) -> usize {
        self.capacity
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Tokens the mesh can hold in this mode.
    pub fn max_tokens(&self) -> usize {
        match self.mode {
            KvMode::Concat => self.capacity,
            KvMode::Shift => self.capacity * self.height,
        }
    }

    pub fn chunks_at(&self, c: CoreCoord) -> usize {
        self.rows[c.y].len()
    }

    /// Tokens held by row `y` (in every column), oldest first.
    pub fn row_tokens(&self, y: usize) -> Vec<usize> {
        self.rows[y].iter().map(|c| c.token).collect()
    }

    /// Row holding `token`, if cached.
    pub fn row_of(&self, token: usize) -> Option<usize> {
        self.rows.iter().position(|r| r.iter().any(|c| c.token == token))
    }

    /// Max minus min chunk count over all cores.
    pub fn spread(&self) -> usize {
        let max = self.rows.iter().map(VecDeque::len).max().unwrap_or(0);
        let min = self.rows.iter().map(VecDeque::len).min().unwrap_or(0);
        max - min
    }

    /// Tokens in core order: rows top to bottom, oldest first within a core.
    pub fn token_order(&self) -> Vec<usize> {
        self.rows.iter().flat_map(|r| r.iter().map(|c| c.token)).collect()
    }

    /// Transfers made by the last append, as `(from, to)` core pairs.
    pub fn last_moves(&self) -> &[(CoreCoord, CoreCoord)] {
        &self.last_moves
    }

    pub fn peak_bytes(&self) -> u64 {
        self.rows.iter().map(VecDeque::len).max().unwrap_or(0) as u64 * self.chunk_bytes
    }

    /// Appends the next token's chunks and rebalances in shift mode.
    pub fn append(&mut self, config: &PlmrConfig) -> Result<SimReport> {
        match self.mode {
            KvMode::Concat => self.append_concat(),
            KvMode::Shift => self.append_shift(config),
        }
    }

    fn append_concat(&mut self) -> Result<SimReport> {
        let last = self.height - 1;
        if self.rows[last].len() >= self.capacity {
            return Err(Error::KvCapacity(format!(
                "core (0, {last}) holds {} of {} chunks; {} tokens cached",
                self.rows[last].len(),
                self.capacity,
                self.tokens
            )));
        }
        self.last_moves.clear();
        self.rows[last].push_back(KvChunk { token: self.tokens, bytes: self.chunk_bytes });
        self.tokens += 1;
        let mut report = SimReport::new("kv-concat");
        report.peak_mem_bytes = self.peak_bytes();
        Ok(report)
    }

    fn append_shift(&mut self, config: &PlmrConfig) -> Result<SimReport> {
        if self.tokens >= self.max_tokens() {
            return Err(Error::KvCapacity(format!(
                "all {} rows hold {} chunks; {} tokens cached",
                self.height, self.capacity, self.tokens
            )));
        }
        self.last_moves.clear();
        let last = self.height - 1;
        let top = self.rows[0].len();
        let fuller = self.rows.iter().rev().take_while(|r| r.len() > top).count();
        for y in self.height - fuller..self.height {
            let oldest = self.rows[y].pop_front().expect("fuller row is non-empty");
            self.rows[y - 1].push_back(oldest);
            for x in 0..self.width {
                self.last_moves.push((CoreCoord::new(x, y), CoreCoord::new(x, y - 1)));
            }
        }
        self.rows[last].push_back(KvChunk { token: self.tokens, bytes: self.chunk_bytes });
        self.tokens += 1;
        let mut report = SimReport::new("kv-shift");
        if !self.last_moves.is_empty() {
            let bytes = self.chunk_bytes * self.last_moves.len() as u64;
            let step = StepRecord::comm("shift", StepCost::new(config, 1, 0, bytes))
                .with_serialization(config.serialization_cycles(self.chunk_bytes));
            report.push(step);
        }
        report.peak_mem_bytes = self.peak_bytes();
        Ok(report)
    }

    /// Places `n` tokens on an empty mesh in the arrangement `n` appends
    /// would leave, without charging for moves.
    pub fn preload(&mut self, n: usize) -> Result<()> {
        if self.tokens != 0 {
            return Err(Error::Integrity(format!("preload into a cache already holding {} tokens", self.tokens)));
        }
        if n > self.max_tokens() {
            return Err(Error::KvCapacity(format!("{n} tokens exceed the {} the mesh can hold", self.max_tokens())));
        }
        let chunk = |token| KvChunk { token, bytes: self.chunk_bytes };
        match self.mode {
            KvMode::Concat => self.rows[self.height - 1].extend((0..n).map(chunk)),
            KvMode::Shift => {
                let (base, extra) = (n / self.height, n % self.height);
                let mut next = 0;
                for y in 0..self.height {
                    let count = base + usize::from(y >= self.height - extra);
                    self.rows[y].extend((next..next + count).map(chunk));
                    next += count;
                }
            }
        }
        self.tokens = n;
        self.last_moves.clear();
        Ok(())
    }

    /// Grid of chunk counts as CSV: header `y,x0,x1,...`, one line per row.
    pub fn balance_csv(&self) -> String {
        let mut out = String::from("y");
        for x in 0..self.width {
            write!(out, ",x{x}").unwrap();
        }
        out.push('\n');
        for (y, row) in self.rows.iter().enumerate() {
            write!(out, "{y}").unwrap();
            for _ in 0..self.width {
                write!(out, ",{}", row.len()).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Shift-mode over concat-mode token capacity for a mesh.
pub fn kv_capacity_ratio(width: usize, height: usize, capacity: usize) -> Result<f64> {
    let shift = KvMeshState::new(width, height, capacity, 1, KvMode::Shift)?.max_tokens();
    let concat = KvMeshState::new(width, height, capacity, 1, KvMode::Concat)?.max_tokens();
    if concat == 0 {
        return Err(Error::Domain("cores have no room for a single chunk".into()));
    }
    Ok(shift as f64 / concat as f64)
}
