//! Dual image-video cross-attention.
//!
//! Each side is `[tokens; class]`. Attention inputs are `norm(x + pos)`, the
//! residual stream is the raw `x`, and each branch ends in a residual MLP:
//!
//! ```text
//! image_out = mlp_i(X_i + A_i2v(norm_i(X_i + P_i), norm_v(X_v + P_v)))
//! video_out = mlp_v(X_v + A_v2i(norm_v(X_v + P_v), norm_i(X_i + P_i)))
//! ```

use rand::Rng;

use super::layers::{
    attend, attend_backward, AttentionTrace, AttentionWeights, LayerNormParams, MlpTrace, ResidualMlp,
};
use super::TokenBundle;
use crate::error::{Result, StaError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DualAttentionWeights {
    /// Image queries, video keys/values.
    pub image_guided: AttentionWeights,
    /// Video queries, image keys/values.
    pub video_guided: AttentionWeights,
    pub image_mlp: ResidualMlp,
    pub video_mlp: ResidualMlp,
    /// Pre-attention norms; `None` skips normalization on that side.
    pub image_norm: Option<LayerNormParams>,
    pub video_norm: Option<LayerNormParams>,
}

impl DualAttentionWeights {
    /// Random attention weights and MLPs of width `mlp_width`, standard pre-norms.
    pub fn random(rng: &mut impl Rng, d_model: usize, heads: usize, d_head: usize, mlp_width: usize) -> Self {
        Self {
            image_guided: AttentionWeights::random(rng, d_model, heads, d_head),
            video_guided: AttentionWeights::random(rng, d_model, heads, d_head),
            image_mlp: ResidualMlp::random(rng, d_model, mlp_width),
            video_mlp: ResidualMlp::random(rng, d_model, mlp_width),
            image_norm: Some(LayerNormParams::standard(d_model)),
            video_norm: Some(LayerNormParams::standard(d_model)),
        }
    }

    fn d_model(&self) -> usize {
        self.image_guided.d_model()
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let dims = [self.video_guided.d_model(), self.image_mlp.d_model(), self.video_mlp.d_model()];
        if let Some(&bad) = dims.iter().find(|&&x| x != d) {
            return Err(StaError::LengthMismatch { what: "dual attention d_model", expected: d, actual: bad });
        }
        for n in [&self.image_norm, &self.video_norm].into_iter().flatten() {
            if n.gamma.len() != d || n.beta.len() != d {
                return Err(StaError::LengthMismatch {
                    what: "dual attention norm",
                    expected: d,
                    actual: n.gamma.len(),
                });
            }
        }
        Ok(())
    }
}

struct Side {
    raw: Matrix,
    embedded: Matrix,
    normed: Matrix,
}

pub struct DualTrace {
    image: Side,
    video: Side,
    image_attention: AttentionTrace,
    video_attention: AttentionTrace,
    image_mlp: MlpTrace,
    video_mlp: MlpTrace,
    spatial_tokens: usize,
}

impl DualTrace {
    /// Attention maps of the image-guided branch followed by the video-guided one.
    pub fn probabilities(&self) -> Vec<&Matrix> {
        let mut out = self.image_attention.probabilities();
        out.extend(self.video_attention.probabilities());
        out
    }
}

#[derive(Debug, Clone)]
pub struct DualGrads {
    pub image_tokens: Matrix,
    pub image_class: Vec<f64>,
    pub image_positional: Matrix,
    pub video_tokens: Matrix,
    pub video_class: Vec<f64>,
    pub video_positional: Matrix,
    pub weights: DualAttentionWeights,
}

fn prepare(bundle: &TokenBundle, norm: &Option<LayerNormParams>) -> Result<Side> {
    let raw = bundle.with_class_row()?;
    let embedded = match bundle.positional() {
        Some(p) => raw.add(p)?,
        None => raw.clone(),
    };
    let normed = match norm {
        Some(n) => n.forward(&embedded)?,
        None => embedded.clone(),
    };
    Ok(Side { raw, embedded, normed })
}

fn split(m: &Matrix, spatial: usize) -> (Matrix, Vec<f64>) {
    (m.slice_rows(0, spatial), m.row(spatial).to_vec())
}

/// Returns the refined image bundle and the refined video bundle, each with
/// its refined class token. Positional embeddings are carried over.
pub fn dual_attention(
    image: &TokenBundle,
    video: &TokenBundle,
    w: &DualAttentionWeights,
) -> Result<(TokenBundle, TokenBundle)> {
    let (image_out, video_out, trace) = dual_attention_forward(image, video, w)?;
    let n = trace.spatial_tokens;
    let (it, ic) = split(&image_out, n);
    let (vt, vc) = split(&video_out, n);
    Ok((
        TokenBundle::new(it, Some(ic), image.positional().cloned())?,
        TokenBundle::new(vt, Some(vc), video.positional().cloned())?,
    ))
}

/// Forward pass returning both `(N+1) × d` outputs (class token last) and the trace.
pub fn dual_attention_forward(
    image: &TokenBundle,
    video: &TokenBundle,
    w: &DualAttentionWeights,
) -> Result<(Matrix, Matrix, DualTrace)> {
    w.validate()?;
    if image.token_count() != video.token_count() {
        return Err(StaError::ShapeMismatch {
            op: "dual attention token count",
            left: image.tokens().shape(),
            right: video.tokens().shape(),
        });
    }
    if image.class_token().is_none() {
        return Err(StaError::Missing("image class token".into()));
    }
    if video.class_token().is_none() {
        return Err(StaError::Missing("video class token".into()));
    }
    let img = prepare(image, &w.image_norm)?;
    let vid = prepare(video, &w.video_norm)?;

    let (att_i, trace_i) = attend(&img.normed, &vid.normed, &w.image_guided)?;
    let (att_v, trace_v) = attend(&vid.normed, &img.normed, &w.video_guided)?;
    let (out_i, mlp_i) = w.image_mlp.forward(&img.raw.add(&att_i)?)?;
    let (out_v, mlp_v) = w.video_mlp.forward(&vid.raw.add(&att_v)?)?;
    Ok((
        out_i,
        out_v,
        DualTrace {
            image: img,
            video: vid,
            image_attention: trace_i,
            video_attention: trace_v,
            image_mlp: mlp_i,
            video_mlp: mlp_v,
            spatial_tokens: image.token_count(),
        },
    ))
}

/// Reverse pass of [`dual_attention_forward`] given output gradients for both branches.
pub fn dual_attention_backward(
    trace: &DualTrace,
    w: &DualAttentionWeights,
    d_image_out: &Matrix,
    d_video_out: &Matrix,
) -> Result<DualGrads> {
    let (d_hi, g_mlp_i) = w.image_mlp.backward(&trace.image_mlp, d_image_out)?;
    let (d_hv, g_mlp_v) = w.video_mlp.backward(&trace.video_mlp, d_video_out)?;
    let g_i = attend_backward(&trace.image_attention, &w.image_guided, &d_hi)?;
    let g_v = attend_backward(&trace.video_attention, &w.video_guided, &d_hv)?;

    // normed inputs feed both branches: queries on one side, keys/values on the other
    let d_norm_i = g_i.queries.add(&g_v.keys_values)?;
    let d_norm_v = g_v.queries.add(&g_i.keys_values)?;

    let (d_emb_i, norm_i) = norm_backward(&w.image_norm, &trace.image.embedded, d_norm_i);
    let (d_emb_v, norm_v) = norm_backward(&w.video_norm, &trace.video.embedded, d_norm_v);

    let d_raw_i = d_hi.add(&d_emb_i)?;
    let d_raw_v = d_hv.add(&d_emb_v)?;
    let n = trace.spatial_tokens;
    let (image_tokens, image_class) = split(&d_raw_i, n);
    let (video_tokens, video_class) = split(&d_raw_v, n);
    debug_assert_eq!(trace.image.raw.shape(), d_raw_i.shape());
    debug_assert_eq!(trace.video.normed.shape(), d_raw_v.shape());
    Ok(DualGrads {
        image_tokens,
        image_class,
        image_positional: d_emb_i,
        video_tokens,
        video_class,
        video_positional: d_emb_v,
        weights: DualAttentionWeights {
            image_guided: g_i.weights,
            video_guided: g_v.weights,
            image_mlp: g_mlp_i,
            video_mlp: g_mlp_v,
            image_norm: norm_i,
            video_norm: norm_v,
        },
    })
}

fn norm_backward(norm: &Option<LayerNormParams>, x: &Matrix, dy: Matrix) -> (Matrix, Option<LayerNormParams>) {
    match norm {
        Some(n) => {
            let (dx, gamma, beta) = n.backward(x, &dy);
            (dx, Some(LayerNormParams { gamma, beta, eps: n.eps }))
        }
        None => (dy, None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HeadWeights;
    use crate::tensor::layer_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn bundle(tokens: Matrix, class: Vec<f64>, pos: Option<Matrix>) -> TokenBundle {
        TokenBundle::new(tokens, Some(class), pos).unwrap()
    }

    #[test]
    fn residual_identity_with_zero_values_and_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = DualAttentionWeights::random(&mut rng, 4, 2, 2, 16);
        w.image_guided.zero_values();
        w.video_guided.zero_values();
        w.image_mlp = ResidualMlp::zeros(4, 16);
        w.video_mlp = ResidualMlp::zeros(4, 16);
        let it = Matrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.7);
        let vt = Matrix::from_fn(3, 4, |r, c| (r * c) as f64 * 0.1 + 0.3);
        let pos = Matrix::from_fn(4, 4, |r, c| ((r + 2 * c) as f64).sin());
        let image = bundle(it.clone(), vec![1.0, 2.0, 3.0, 4.0], Some(pos.clone()));
        let video = bundle(vt.clone(), vec![-1.0, 0.0, 0.5, 2.0], Some(pos));
        let (oi, ov) = dual_attention(&image, &video, &w).unwrap();
        assert!(oi.tokens().max_abs_diff(&it) <= 1e-12);
        assert!(ov.tokens().max_abs_diff(&vt) <= 1e-12);
        assert_eq!(oi.class_token().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(ov.class_token().unwrap(), &[-1.0, 0.0, 0.5, 2.0]);
        assert_eq!(oi.token_count(), 3);
        assert_eq!(ov.token_count(), 3);
    }

    #[test]
    fn requires_class_tokens_and_equal_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DualAttentionWeights::random(&mut rng, 2, 1, 2, 8);
        let with = bundle(Matrix::zeros(2, 2), vec![0.0; 2], None);
        let without = TokenBundle::from_tokens(Matrix::zeros(2, 2));
        assert!(dual_attention(&with, &without, &w).is_err());
        assert!(dual_attention(&without, &with, &w).is_err());
        let three = bundle(Matrix::zeros(3, 2), vec![0.0; 2], None);
        assert!(dual_attention(&with, &three, &w).is_err());
    }

    fn gelu_ref(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// Explicit per-element evaluation for one head, d_head = d.
    fn branch_oracle(
        raw_q: &Matrix,
        norm_q: &Matrix,
        norm_kv: &Matrix,
        w: &AttentionWeights,
        mlp: &ResidualMlp,
    ) -> Vec<Vec<f64>> {
        let d = raw_q.cols();
        let h = &w.heads()[0];
        let lin = |x: &[f64], p: &Matrix| -> Vec<f64> {
            (0..p.cols()).map(|j| (0..x.len()).map(|k| x[k] * p.get(k, j)).sum()).collect()
        };
        let mut out = Vec::new();
        for i in 0..raw_q.rows() {
            let q = lin(norm_q.row(i), &h.query);
            let keys: Vec<Vec<f64>> = (0..norm_kv.rows()).map(|j| lin(norm_kv.row(j), &h.key)).collect();
            let vals: Vec<Vec<f64>> = (0..norm_kv.rows()).map(|j| lin(norm_kv.row(j), &h.value)).collect();
            let scores: Vec<f64> =
                keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let ctx: Vec<f64> =
                (0..d).map(|c| scores.iter().zip(&vals).map(|(s, v)| s.exp() / z * v[c]).sum()).collect();
            let att = lin(&ctx, w.output());
            let hres: Vec<f64> = (0..d).map(|c| raw_q.get(i, c) + att[c]).collect();
            let pre: Vec<f64> =
                lin(&hres, &mlp.hidden).iter().zip(&mlp.hidden_bias).map(|(a, b)| gelu_ref(a + b)).collect();
            let o = lin(&pre, &mlp.output);
            out.push((0..d).map(|c| hres[c] + o[c] + mlp.output_bias[c]).collect());
        }
        out
    }

    #[test]
    fn matches_straight_line_oracle() {
        let image_tokens = m(&[&[0.5, -1.0], &[1.5, 0.25]]);
        let video_tokens = m(&[&[-0.3, 0.8], &[0.9, 0.1]]);
        let ci = vec![0.2, 0.4];
        let cv = vec![-0.6, 1.1];
        let pos_i = m(&[&[0.1, 0.0], &[0.0, 0.1], &[0.05, -0.05]]);
        let pos_v = m(&[&[0.0, 0.2], &[-0.1, 0.0], &[0.3, 0.3]]);
        let att = |a: f64| {
            AttentionWeights::new(
                vec![HeadWeights {
                    query: m(&[&[a, 0.3], &[-0.2, 0.8]]),
                    key: m(&[&[0.6, -0.4], &[0.1, a]]),
                    value: m(&[&[1.0, 0.5], &[-0.5, 0.7]]),
                }],
                m(&[&[0.9, 0.1], &[0.2, -0.3]]),
            )
            .unwrap()
        };
        let mlp = |s: f64| {
            ResidualMlp::new(
                m(&[&[0.3 * s, -0.2, 0.5], &[0.1, 0.4, -0.6 * s]]),
                vec![0.05, -0.1, 0.0],
                m(&[&[0.2, -0.1], &[0.7, 0.3], &[-0.4, 0.25 * s]]),
                vec![0.01, -0.02],
            )
            .unwrap()
        };
        let norm = |g: f64| LayerNormParams { gamma: vec![g, 1.0], beta: vec![0.1, -0.1], eps: 1e-5 };
        let w = DualAttentionWeights {
            image_guided: att(1.2),
            video_guided: att(-0.7),
            image_mlp: mlp(1.0),
            video_mlp: mlp(-2.0),
            image_norm: Some(norm(1.5)),
            video_norm: Some(norm(0.5)),
        };
        let image = bundle(image_tokens.clone(), ci.clone(), Some(pos_i.clone()));
        let video = bundle(video_tokens.clone(), cv.clone(), Some(pos_v.clone()));
        let (oi, ov) = dual_attention(&image, &video, &w).unwrap();

        let raw_i = image_tokens.vstack(&Matrix::row_vector(&ci).unwrap()).unwrap();
        let raw_v = video_tokens.vstack(&Matrix::row_vector(&cv).unwrap()).unwrap();
        let ln = |x: &Matrix, p: &Matrix, n: &LayerNormParams| {
            layer_norm(&x.add(p).unwrap(), &n.gamma, &n.beta, n.eps).unwrap()
        };
        let ni = ln(&raw_i, &pos_i, w.image_norm.as_ref().unwrap());
        let nv = ln(&raw_v, &pos_v, w.video_norm.as_ref().unwrap());
        let expect_i = branch_oracle(&raw_i, &ni, &nv, &w.image_guided, &w.image_mlp);
        let expect_v = branch_oracle(&raw_v, &nv, &ni, &w.video_guided, &w.video_mlp);

        for r in 0..2 {
            for c in 0..2 {
                assert!((oi.tokens().get(r, c) - expect_i[r][c]).abs() < 1e-13);
                assert!((ov.tokens().get(r, c) - expect_v[r][c]).abs() < 1e-13);
            }
        }
        for c in 0..2 {
            assert!((oi.class_token().unwrap()[c] - expect_i[2][c]).abs() < 1e-13);
            assert!((ov.class_token().unwrap()[c] - expect_v[2][c]).abs() < 1e-13);
        }
    }
}
