use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::shape::ModelShape;
use crate::tiles::Matrix;

/// One decoder layer. Attention weights are kept per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `E x H` each.
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    /// `H x E` each.
    pub wo: Vec<Matrix>,
    /// `E x F`.
    pub w_in: Matrix,
    /// `F x E`.
    pub w_out: Matrix,
    /// RMSNorm gains, `1 x E`.
    pub norm_attn: Matrix,
    pub norm_ffn: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub seed: u64,
    /// `vocab x E`.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub norm_final: Matrix,
    /// `E x vocab`.
    pub lm_head: Matrix,
}

impl LayerWeights {
    pub fn random(shape: &ModelShape, rng: &mut ChaCha8Rng) -> Self {
        let (e, h, f) = (shape.embed, shape.head_dim, shape.ffn);
        let se = 1.0 / (e as f32).sqrt();
        let sh = 1.0 / (h as f32).sqrt();
        let heads = |rng: &mut ChaCha8Rng| (0..shape.heads).map(|_| Matrix::random_uniform(e, h, se, rng)).collect();
        let wq = heads(rng);
        let wk = heads(rng);
        let wv = heads(rng);
        let wo = (0..shape.heads).map(|_| Matrix::random_uniform(h, e, sh, rng)).collect();
        let w_in = Matrix::random_uniform(e, f, se, rng);
        let w_out = Matrix::random_uniform(f, e, 1.0 / (f as f32).sqrt(), rng);
        let gain = |rng: &mut ChaCha8Rng| Matrix::random_uniform(1, e, 0.25, rng).map(|g| 1.0 + g);
        let norm_attn = gain(rng);
        let norm_ffn = gain(rng);
        Self { wq, wk, wv, wo, w_in, w_out, norm_attn, norm_ffn }
    }

    pub fn zeros(shape: &ModelShape) -> Self {
        let (e, h, f) = (shape.embed, shape.head_dim, shape.ffn);
        let heads = |r, c| vec![Matrix::zeros(r, c); shape.heads];
        Self {
            wq: heads(e, h),
            wk: heads(e, h),
            wv: heads(e, h),
            wo: heads(h, e),
            w_in: Matrix::zeros(e, f),
            w_out: Matrix::zeros(f, e),
            norm_attn: Matrix::filled(1, e, 1.0),
            norm_ffn: Matrix::filled(1, e, 1.0),
        }
    }
}

impl ModelWeights {
    /// Seeded uniform weights scaled by `1/sqrt(fan_in)`.
    pub fn random(shape: &ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Matrix::random_uniform(shape.vocab, shape.embed, 1.0, &mut rng);
        let layers = (0..shape.layers).map(|_| LayerWeights::random(shape, &mut rng)).collect();
        let norm_final = Matrix::random_uniform(1, shape.embed, 0.25, &mut rng).map(|g| 1.0 + g);
        let lm_head = Matrix::random_uniform(shape.embed, shape.vocab, 1.0 / (shape.embed as f32).sqrt(), &mut rng);
        Self { seed, embedding, layers, norm_final, lm_head }
    }
}
