//! Mapping of tensor dimensions onto mesh axes.
//!
//! Written in subscript/superscript notation: `L_yE_x` partitions `L` along
//! the Y axis and `E` along the X axis; `E^y` replicates the whole `E`
//! extent along Y. A dimension with no marker (the batch `B`) is not mapped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabric::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DimMode {
    Partitioned,
    Replicated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DimMap {
    pub name: String,
    /// `None` for a dimension that stays whole on every core and is not replicated.
    pub axis: Option<Axis>,
    pub mode: DimMode,
}

impl DimMap {
    pub fn part(name: &str, axis: Axis) -> Self {
        Self { name: name.into(), axis: Some(axis), mode: DimMode::Partitioned }
    }

    pub fn repl(name: &str, axis: Axis) -> Self {
        Self { name: name.into(), axis: Some(axis), mode: DimMode::Replicated }
    }

    pub fn whole(name: &str) -> Self {
        Self { name: name.into(), axis: None, mode: DimMode::Replicated }
    }

    pub fn partitioned_on(&self) -> Option<Axis> {
        match self.mode {
            DimMode::Partitioned => self.axis,
            DimMode::Replicated => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub dims: Vec<DimMap>,
}

impl Layout {
    pub fn new(dims: Vec<DimMap>) -> Result<Self> {
        let l = Self { dims };
        l.validate()?;
        Ok(l)
    }

    /// Row dimension partitioned on Y, column dimension on X: `R_yC_x`.
    pub fn tiled(rows: &str, cols: &str) -> Self {
        Self { dims: vec![DimMap::part(rows, Axis::Y), DimMap::part(cols, Axis::X)] }
    }

    /// Row dimension partitioned on X, column dimension on Y: `R_xC_y`.
    pub fn tiled_transposed(rows: &str, cols: &str) -> Self {
        Self { dims: vec![DimMap::part(rows, Axis::X), DimMap::part(cols, Axis::Y)] }
    }

    /// Each axis carries at most one dimension, and names are unique.
    pub fn validate(&self) -> Result<()> {
        for axis in [Axis::X, Axis::Y] {
            let users: Vec<&str> = self
                .dims
                .iter()
                .filter(|d| d.axis == Some(axis))
                .map(|d| d.name.as_str())
                .collect();
            if users.len() > 1 {
                return Err(Error::Shape(format!(
                    "layout {self} maps {} onto axis {axis}",
                    users.join(", ")
                )));
            }
        }
        for (i, d) in self.dims.iter().enumerate() {
            if d.name.is_empty() {
                return Err(Error::Shape("layout dimension without a name".into()));
            }
            if self.dims[..i].iter().any(|o| o.name == d.name) {
                return Err(Error::Shape(format!("layout {self} repeats dimension {}", d.name)));
            }
        }
        Ok(())
    }

    pub fn dim(&self, name: &str) -> Option<&DimMap> {
        self.dims.iter().find(|d| d.name == name)
    }

    /// The two trailing dimensions, which index matrix rows and columns.
    pub fn matrix_dims(&self) -> Result<(&DimMap, &DimMap)> {
        let n = self.dims.len();
        if n < 2 {
            return Err(Error::Shape(format!("layout {self} has fewer than two dimensions")));
        }
        if self.dims[..n - 2].iter().any(|d| d.axis.is_some()) {
            return Err(Error::Shape(format!(
                "layout {self}: only the last two dimensions may be mapped to the mesh"
            )));
        }
        Ok((&self.dims[n - 2], &self.dims[n - 1]))
    }

    pub fn with_batch(mut self, name: &str) -> Self {
        self.dims.insert(0, DimMap::whole(name));
        self
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.dims {
            f.write_str(&d.name)?;
            match (d.axis, d.mode) {
                (None, _) => {}
                (Some(a), DimMode::Partitioned) => write!(f, "_{a}")?,
                (Some(a), DimMode::Replicated) => write!(f, "^{a}")?,
            }
        }
        Ok(())
    }
}

impl FromStr for Layout {
    type Err = Error;

    /// Parses `BL_yE_x`-style notation. A name is an uppercase letter
    /// followed by digits or primes.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |at: usize, msg: &str| Error::Parse {
            location: format!("layout {s:?}, offset {at}"),
            message: msg.to_string(),
        };
        let chars: Vec<char> = s.chars().collect();
        let mut dims = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if !chars[i].is_ascii_uppercase() {
                return Err(bad(i, "expected an uppercase dimension name"));
            }
            let start = i;
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '\'') {
                i += 1;
            }
            let name: String = chars[start..i].iter().collect();
            let mut dim = DimMap::whole(&name);
            if i < chars.len() && (chars[i] == '_' || chars[i] == '^') {
                let mode = if chars[i] == '_' { DimMode::Partitioned } else { DimMode::Replicated };
                let axis = match chars.get(i + 1) {
                    Some('x') => Axis::X,
                    Some('y') => Axis::Y,
                    _ => return Err(bad(i + 1, "expected axis x or y")),
                };
                dim = DimMap { name, axis: Some(axis), mode };
                i += 2;
            }
            dims.push(dim);
        }
        Layout::new(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn notation_round_trips() {
        for s in ["BL_yE_x", "BE_yL^x", "E^yF_x", "H_yE_x", "L_yL'_x", "E_yH1_x"] {
            let l: Layout = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
    }

    #[test]
    fn decode_activation_layout() {
        let l: Layout = "BE_yL^x".parse().unwrap();
        let (rows, cols) = l.matrix_dims().unwrap();
        assert_eq!(rows.partitioned_on(), Some(Axis::Y));
        assert_eq!(cols.mode, DimMode::Replicated);
        assert_eq!(cols.axis, Some(Axis::X));
    }

    #[test]
    fn rejects_two_dims_on_one_axis() {
        assert!("L_yE_y".parse::<Layout>().is_err());
        assert!("L_yE^y".parse::<Layout>().is_err());
        assert!("L_yL_x".parse::<Layout>().is_err());
        assert!("L_z".parse::<Layout>().is_err());
        assert!("l_y".parse::<Layout>().is_err());
    }

    #[test]
    fn helpers_match_notation() {
        assert_eq!(Layout::tiled("L", "E").with_batch("B").to_string(), "BL_yE_x");
        assert_eq!(Layout::tiled_transposed("H", "E").to_string(), "H_xE_y");
    }
}
