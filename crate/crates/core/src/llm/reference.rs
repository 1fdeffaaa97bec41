//! Single-core dense transformer used as the ground truth for the mesh runs.

use super::shape::ModelShape;
use super::weights::{LayerWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::tiles::Matrix;

pub const NORM_EPS: f32 = 1e-5;

pub fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// Row-wise `x / rms(x) * gain`.
pub fn rmsnorm(x: &Matrix, gain: &Matrix) -> Matrix {
    let mut out = x.clone();
    let e = x.cols() as f32;
    for r in 0..x.rows() {
        let ms: f32 = x.row(r).iter().map(|v| v * v).sum::<f32>() / e;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for (o, g) in out.row_mut(r).iter_mut().zip(gain.row(0)) {
            *o *= inv * g;
        }
    }
    out
}

/// Row-wise softmax where row `i` sees columns `0..=i + offset`.
pub fn causal_softmax(s: &mut Matrix, offset: usize) {
    for i in 0..s.rows() {
        let visible = (i + offset + 1).min(s.cols());
        let row = s.row_mut(i);
        let max = row[..visible].iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in &mut row[..visible] {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row[..visible] {
            *v /= sum;
        }
        row[visible..].iter_mut().for_each(|v| *v = 0.0);
    }
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(a.rows(), b.cols());
    c.matmul_acc(a, b).expect("conformable by construction");
    c
}

/// Keys and values of every processed position, per head (`tokens x H`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseKv {
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl DenseKv {
    pub fn new(shape: &ModelShape) -> Self {
        let empty = vec![Matrix::zeros(0, shape.head_dim); shape.heads];
        Self { k: empty.clone(), v: empty }
    }

    pub fn len(&self) -> usize {
        self.k.first().map_or(0, Matrix::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn append_rows(m: &Matrix, rows: &Matrix) -> Matrix {
    let mut data = m.data().to_vec();
    data.extend_from_slice(rows.data());
    Matrix::from_vec(m.rows() + rows.rows(), rows.cols(), data).expect("same width")
}

/// Runs `x` (new positions, `T x E`) through one layer, attending to the
/// cache plus the new positions causally. Appends the new keys and values.
pub fn layer_forward(shape: &ModelShape, w: &LayerWeights, x: &Matrix, cache: &mut DenseKv) -> Result<Matrix> {
    if x.cols() != shape.embed {
        return Err(Error::Shape(format!("layer input has {} columns, expected {}", x.cols(), shape.embed)));
    }
    let past = cache.len();
    let h = rmsnorm(x, &w.norm_attn);
    let scale = 1.0 / (shape.head_dim as f32).sqrt();
    let mut attn = Matrix::zeros(x.rows(), shape.embed);
    for head in 0..shape.heads {
        let q = matmul(&h, &w.wq[head]);
        cache.k[head] = append_rows(&cache.k[head], &matmul(&h, &w.wk[head]));
        cache.v[head] = append_rows(&cache.v[head], &matmul(&h, &w.wv[head]));
        let mut s = Matrix::zeros(x.rows(), past + x.rows());
        s.matmul_t_acc(&q, &cache.k[head])?;
        let mut s = s.map(|v| v * scale);
        causal_softmax(&mut s, past);
        let ctx = matmul(&s, &cache.v[head]);
        attn.matmul_acc(&ctx, &w.wo[head])?;
    }
    let mut x1 = x.clone();
    x1.add_assign(&attn)?;
    let h2 = rmsnorm(&x1, &w.norm_ffn);
    let f = matmul(&h2, &w.w_in).map(silu);
    x1.add_assign(&matmul(&f, &w.w_out))?;
    Ok(x1)
}

pub fn embed(weights: &ModelWeights, tokens: &[usize]) -> Result<Matrix> {
    let vocab = weights.embedding.rows();
    let mut out = Matrix::zeros(tokens.len(), weights.embedding.cols());
    for (i, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Domain(format!("token {t} outside vocabulary of {vocab}")));
        }
        out.row_mut(i).copy_from_slice(weights.embedding.row(t));
    }
    Ok(out)
}

pub fn logits(weights: &ModelWeights, hidden: &Matrix) -> Matrix {
    matmul(&rmsnorm(hidden, &weights.norm_final), &weights.lm_head)
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Everything a greedy generation produced, for comparison across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Output of every layer during prefill (`L x E` each).
    pub prefill_layers: Vec<Matrix>,
    /// Logits behind each generated token.
    pub logits: Vec<Matrix>,
    /// Output of every layer at every decode step (`1 x E` each).
    pub decode_layers: Vec<Vec<Matrix>>,
    pub tokens: Vec<usize>,
}

/// Greedy generation: prefill the prompt, then `decode_steps` single-token steps.
/// Returns `decode_steps + 1` tokens.
pub fn generate(shape: &ModelShape, weights: &ModelWeights, prompt: &[usize], decode_steps: usize) -> Result<Generation> {
    shape.validate()?;
    let mut caches: Vec<DenseKv> = (0..shape.layers).map(|_| DenseKv::new(shape)).collect();
    let mut x = embed(weights, prompt)?;
    let mut prefill_layers = Vec::new();
    for (w, cache) in weights.layers.iter().zip(&mut caches) {
        x = layer_forward(shape, w, &x, cache)?;
        prefill_layers.push(x.clone());
    }
    let last = x.block(x.rows() - 1, 0, 1, x.cols());
    let mut out = Generation { prefill_layers, logits: vec![], decode_layers: vec![], tokens: vec![] };
    let l = logits(weights, &last);
    out.tokens.push(argmax(l.row(0)));
    out.logits.push(l);
    for _ in 0..decode_steps {
        let mut x = embed(weights, &[*out.tokens.last().unwrap()])?;
        let mut step = Vec::new();
        for (w, cache) in weights.layers.iter().zip(&mut caches) {
            x = layer_forward(shape, w, &x, cache)?;
            step.push(x.clone());
        }
        let l = logits(weights, &x);
        out.tokens.push(argmax(l.row(0)));
        out.logits.push(l);
        out.decode_layers.push(step);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_leave_residual() {
        let shape = ModelShape::toy();
        let w = LayerWeights::zeros(&shape);
        let x = Matrix::from_fn(4, 32, |r, c| (r + c) as f32 * 0.1);
        let mut cache = DenseKv::new(&shape);
        assert_eq!(layer_forward(&shape, &w, &x, &mut cache).unwrap(), x);
        assert_eq!(cache.len(), 4);
    }

    #[test]
    fn incremental_equals_full_prefill() {
        let shape = ModelShape::toy();
        let w = ModelWeights::random(&shape, 5);
        let x = Matrix::from_fn(6, 32, |r, c| ((r * 7 + c * 3) % 11) as f32 * 0.1 - 0.5);
        let mut full = DenseKv::new(&shape);
        let all = layer_forward(&shape, &w.layers[0], &x, &mut full).unwrap();
        let mut inc = DenseKv::new(&shape);
        for r in 0..6 {
            let out = layer_forward(&shape, &w.layers[0], &x.block(r, 0, 1, 32), &mut inc).unwrap();
            assert!(out.max_rel_diff(&all.block(r, 0, 1, 32), 1e-3) < 1e-5);
        }
    }

    #[test]
    fn softmax_masks_future() {
        let mut s = Matrix::filled(3, 3, 1.0);
        causal_softmax(&mut s, 0);
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(s.row(2), &[1.0 / 3.0; 3]);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
