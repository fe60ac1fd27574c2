//! Attention-based fusion of image and video tokens.
//!
//! Every block here has a forward pass and an analytic reverse pass. The
//! reverse passes are checked against central finite differences in
//! [`gradcheck`].

mod dual;
pub mod gradcheck;
mod layers;
mod pooling;
mod pyramid;

pub use dual::{
    dual_attention, dual_attention_backward, dual_attention_forward, DualAttentionWeights, DualGrads, DualTrace,
};
pub use gradcheck::{grad_check, loss_and_grads, random_case, GradCheckDims, GradCheckReport, OpId};
pub use layers::{
    attend, attend_backward, gelu, gelu_derivative, AttentionGrads, AttentionTrace, AttentionWeights, HeadWeights,
    LayerNormParams, MlpTrace, ResidualMlp, Tensors, LAYER_NORM_EPS,
};
pub use pooling::{
    frame_guided_pooling, frame_guided_pooling_backward, frame_guided_pooling_forward, FramePooling, PoolingGrads,
    PoolingTrace,
};
pub use pyramid::{build_pyramid, fuse_pyramids, FeaturePyramid};

use crate::error::{Result, StaError};
use crate::tensor::Matrix;

/// Token matrix (`N × d_model`) with an optional class token and optional
/// positional embeddings. Positional rows cover the class token too when one
/// is present, and it is appended as the last row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    tokens: Matrix,
    class_token: Option<Vec<f64>>,
    positional: Option<Matrix>,
}

impl TokenBundle {
    pub fn new(tokens: Matrix, class_token: Option<Vec<f64>>, positional: Option<Matrix>) -> Result<Self> {
        let d = tokens.cols();
        if let Some(c) = &class_token {
            if c.len() != d {
                return Err(StaError::LengthMismatch { what: "class token", expected: d, actual: c.len() });
            }
            if let Some(i) = c.iter().position(|v| !v.is_finite()) {
                return Err(StaError::NonFinite { what: "class token", index: i });
            }
        }
        if let Some(p) = &positional {
            let rows = tokens.rows() + usize::from(class_token.is_some());
            if p.shape() != (rows, d) {
                return Err(StaError::ShapeMismatch { op: "positional embeddings", left: (rows, d), right: p.shape() });
            }
        }
        Ok(Self { tokens, class_token, positional })
    }

    pub fn from_tokens(tokens: Matrix) -> Self {
        Self { tokens, class_token: None, positional: None }
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn class_token(&self) -> Option<&[f64]> {
        self.class_token.as_deref()
    }

    pub fn positional(&self) -> Option<&Matrix> {
        self.positional.as_ref()
    }

    pub fn d_model(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    /// Tokens with the class token appended as the last row.
    pub(crate) fn with_class_row(&self) -> Result<Matrix> {
        let class = self.class_token.as_ref().ok_or_else(|| StaError::Missing("class token".into()))?;
        self.tokens.vstack(&Matrix::from_vec(1, class.len(), class.clone()))
    }
}

/// Residual multi-head cross-attention: `queries + A(queries, keys_values)`.
///
/// Only the token matrices take part; the class token and positional
/// embeddings of `queries` are carried over to the result unchanged.
pub fn mha(queries: &TokenBundle, keys_values: &TokenBundle, w: &AttentionWeights) -> Result<TokenBundle> {
    let (out, _) = mha_forward(queries.tokens(), keys_values.tokens(), w)?;
    Ok(TokenBundle { tokens: out, class_token: queries.class_token.clone(), positional: queries.positional.clone() })
}

pub fn mha_forward(queries: &Matrix, keys_values: &Matrix, w: &AttentionWeights) -> Result<(Matrix, AttentionTrace)> {
    if queries.cols() != keys_values.cols() {
        return Err(StaError::ShapeMismatch { op: "mha d_model", left: queries.shape(), right: keys_values.shape() });
    }
    let (att, trace) = attend(queries, keys_values, w)?;
    Ok((queries.add(&att)?, trace))
}

pub fn mha_backward(trace: &AttentionTrace, w: &AttentionWeights, d_out: &Matrix) -> Result<AttentionGrads> {
    let mut g = attend_backward(trace, w, d_out)?;
    g.queries.add_assign(d_out)?;
    Ok(g)
}

/// Fused class token `C_T = C̃_I + C̃_V`.
pub fn fuse_class_tokens(image: &[f64], video: &[f64]) -> Result<Vec<f64>> {
    if image.len() != video.len() {
        return Err(StaError::LengthMismatch { what: "class tokens", expected: image.len(), actual: video.len() });
    }
    Ok(image.iter().zip(video).map(|(a, b)| a + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Straight-line evaluation with explicit loops, independent of the
    /// matrix helpers used by `attend`.
    fn oracle_mha(x: &Matrix, y: &Matrix, w: &AttentionWeights) -> Vec<Vec<f64>> {
        let d = x.cols();
        let dh = w.d_head();
        let proj = |m: &Matrix, p: &Matrix, r: usize, j: usize| -> f64 {
            let mut s = 0.0;
            for k in 0..d {
                s += m.get(r, k) * p.get(k, j);
            }
            s
        };
        let mut concat = vec![vec![0.0; dh * w.head_count()]; x.rows()];
        for (h, hw) in w.heads().iter().enumerate() {
            for i in 0..x.rows() {
                let mut scores = Vec::new();
                for j in 0..y.rows() {
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += proj(x, &hw.query, i, c) * proj(y, &hw.key, j, c);
                    }
                    scores.push(s / (dh as f64).sqrt());
                }
                let denom: f64 = scores.iter().map(|s| s.exp()).sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for (j, s) in scores.iter().enumerate() {
                        acc += s.exp() / denom * proj(y, &hw.value, j, c);
                    }
                    concat[i][h * dh + c] = acc;
                }
            }
        }
        (0..x.rows())
            .map(|i| {
                (0..d)
                    .map(|c| {
                        let mut acc = x.get(i, c);
                        for (k, v) in concat[i].iter().enumerate() {
                            acc += v * w.output().get(k, c);
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_key_identity_projections_adds_value() {
        let q = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let kv = Matrix::from_rows(&[vec![4.0, 7.0]]).unwrap();
        let out =
            mha(&TokenBundle::from_tokens(q), &TokenBundle::from_tokens(kv), &AttentionWeights::identity(2)).unwrap();
        let expect = Matrix::from_rows(&[vec![5.0, 5.0], vec![4.5, 10.0]]).unwrap();
        assert!(out.tokens().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn zero_values_is_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = rand_matrix(&mut rng, 3, 4);
        let kv = rand_matrix(&mut rng, 5, 4);
        let mut w = AttentionWeights::random(&mut rng, 4, 2, 2);
        w.zero_values();
        let out = mha(&TokenBundle::from_tokens(q.clone()), &TokenBundle::from_tokens(kv), &w).unwrap();
        assert!(out.tokens().max_abs_diff(&q) <= 1e-12);
    }

    #[test]
    fn matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = rand_matrix(&mut rng, 2, 2);
        let kv = rand_matrix(&mut rng, 3, 2);
        let w = AttentionWeights::random(&mut rng, 2, 1, 2);
        let out = mha(&TokenBundle::from_tokens(q.clone()), &TokenBundle::from_tokens(kv.clone()), &w).unwrap();
        let expect = Matrix::from_rows(&oracle_mha(&q, &kv, &w)).unwrap();
        assert!(out.tokens().max_abs_diff(&expect) < 1e-14);

        let w2 = AttentionWeights::random(&mut rng, 2, 3, 2);
        let out = mha(&TokenBundle::from_tokens(q.clone()), &TokenBundle::from_tokens(kv.clone()), &w2).unwrap();
        let expect = Matrix::from_rows(&oracle_mha(&q, &kv, &w2)).unwrap();
        assert!(out.tokens().max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn permuting_keys_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_matrix(&mut rng, 3, 4);
        let kv = rand_matrix(&mut rng, 4, 4);
        let w = AttentionWeights::random(&mut rng, 4, 2, 2);
        let permuted = Matrix::from_fn(4, 4, |r, c| kv.get([2, 0, 3, 1][r], c));
        let a = mha(&TokenBundle::from_tokens(q.clone()), &TokenBundle::from_tokens(kv), &w).unwrap();
        let b = mha(&TokenBundle::from_tokens(q), &TokenBundle::from_tokens(permuted), &w).unwrap();
        assert!(a.tokens().max_abs_diff(b.tokens()) <= 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = rand_matrix(&mut rng, 3, 4).scale(5.0);
        let kv = rand_matrix(&mut rng, 6, 4).scale(5.0);
        let w = AttentionWeights::random(&mut rng, 4, 2, 2);
        let (_, trace) = mha_forward(&q, &kv, &w).unwrap();
        for p in trace.probabilities() {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn d_model_mismatch_is_error() {
        let w = AttentionWeights::identity(2);
        let q = TokenBundle::from_tokens(Matrix::zeros(1, 2));
        let kv = TokenBundle::from_tokens(Matrix::zeros(1, 3));
        assert!(mha(&q, &kv, &w).is_err());
    }

    #[test]
    fn class_token_fusion() {
        assert_eq!(fuse_class_tokens(&[0.0, 0.0], &[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(fuse_class_tokens(&[3.0, -1.0], &[-3.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(fuse_class_tokens(&[1.0, 2.0], &[3.0, 5.0]).unwrap(), vec![4.0, 7.0]);
        assert!(fuse_class_tokens(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bundle_validates_positional_rows() {
        let t = Matrix::zeros(2, 3);
        assert!(TokenBundle::new(t.clone(), Some(vec![0.0; 3]), Some(Matrix::zeros(3, 3))).is_ok());
        assert!(TokenBundle::new(t.clone(), Some(vec![0.0; 3]), Some(Matrix::zeros(2, 3))).is_err());
        assert!(TokenBundle::new(t.clone(), None, Some(Matrix::zeros(2, 3))).is_ok());
        assert!(TokenBundle::new(t, Some(vec![0.0; 2]), None).is_err());
    }
}
