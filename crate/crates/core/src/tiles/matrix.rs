use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fabric::ELEM_BYTES;

/// Dense row-major matrix of 32-bit floats.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

/// Per-core sub-matrix. Same representation as a global matrix.
pub type Tile = Matrix;

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{}", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(values: Vec<f32>) -> Self {
        Self { rows: 1, cols: values.len(), data: values }
    }

    /// Integer-valued entries drawn uniformly from `lo..=hi`.
    pub fn random_ints(rows: usize, cols: usize, lo: i32, hi: i32, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.gen_range(lo..=hi) as f32)
    }

    pub fn random_uniform(rows: usize, cols: usize, scale: f32, rng: &mut impl Rng) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.data.len() as u64 * ELEM_BYTES
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Explicit transpose. Plans never call this on the mesh.
    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copy of the `rows x cols` window at `(r0, c0)`; cells past the edge read as zero.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| {
            let (gr, gc) = (r0 + r, c0 + c);
            if gr < self.rows && gc < self.cols {
                self.get(gr, gc)
            } else {
                0.0
            }
        })
    }

    /// Writes `src` at `(r0, c0)`, dropping cells past the edge.
    pub fn write_block(&mut self, r0: usize, c0: usize, src: &Matrix) {
        for r in 0..src.rows {
            let gr = r0 + r;
            if gr >= self.rows {
                break;
            }
            for c in 0..src.cols {
                let gc = c0 + c;
                if gc >= self.cols {
                    break;
                }
                self.set(gr, gc, src.get(r, c));
            }
        }
    }

    /// `self += a * b`.
    pub fn matmul_acc(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.cols != b.rows || self.rows != a.rows || self.cols != b.cols {
            return Err(Error::Shape(format!(
                "cannot accumulate {}x{} * {}x{} into {}x{}",
                a.rows, a.cols, b.rows, b.cols, self.rows, self.cols
            )));
        }
        for i in 0..a.rows {
            let out = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for k in 0..a.cols {
                let av = a.data[i * a.cols + k];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in out.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(())
    }

    /// `self += a * b^T` without materialising the transpose.
    pub fn matmul_t_acc(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.cols != b.cols || self.rows != a.rows || self.cols != b.rows {
            return Err(Error::Shape(format!(
                "cannot accumulate {}x{} * ({}x{})^T into {}x{}",
                a.rows, a.cols, b.rows, b.cols, self.rows, self.cols
            )));
        }
        for i in 0..a.rows {
            let arow = a.row(i);
            for j in 0..b.rows {
                let dot: f32 = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                self.data[i * self.cols + j] += dot;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {}x{} to {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Max elementwise `|a - b| / max(|b|, floor)`.
    pub fn max_rel_diff(&self, reference: &Matrix, floor: f32) -> f32 {
        assert_eq!(self.shape(), reference.shape(), "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b).abs() / b.abs().max(floor))
            .fold(0.0, f32::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_pads_with_zero() {
        let m = Matrix::from_fn(3, 3, |r, c| (r * 3 + c) as f32);
        let b = m.block(2, 1, 2, 3);
        assert_eq!(b.data(), &[7.0, 8.0, 0.0, 0.0, 0.0, 0.0]);
        let mut z = Matrix::zeros(3, 3);
        z.write_block(2, 2, &Matrix::filled(2, 2, 1.0));
        assert_eq!(z.get(2, 2), 1.0);
        assert_eq!(z.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn matmul_t_matches_explicit_transpose() {
        let a = Matrix::from_fn(2, 3, |r, c| (r + 2 * c) as f32);
        let b = Matrix::from_fn(4, 3, |r, c| (3 * r) as f32 - c as f32);
        let mut x = Matrix::zeros(2, 4);
        x.matmul_t_acc(&a, &b).unwrap();
        let mut y = Matrix::zeros(2, 4);
        y.matmul_acc(&a, &b.transpose()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn shape_errors() {
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        let mut c = Matrix::zeros(2, 2);
        assert!(c.matmul_acc(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2)).is_err());
        assert!(c.add_assign(&Matrix::zeros(1, 2)).is_err());
    }
}
