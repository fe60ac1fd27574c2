//! Frame-guided temporal pooling: last-frame video tokens query the whole
//! clip and the result keeps the last frame's spatial layout.

use super::layers::{attend, attend_backward, AttentionTrace, AttentionWeights, LayerNormParams};
use super::TokenBundle;
use crate::error::{Result, StaError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct FramePooling {
    pub attention: AttentionWeights,
    /// Optional layer norm on queries and keys/values. Off by default.
    pub norm: Option<LayerNormParams>,
}

impl FramePooling {
    pub fn new(attention: AttentionWeights) -> Self {
        Self { attention, norm: None }
    }
}

pub struct PoolingTrace {
    last_frame: Matrix,
    video: Matrix,
    attention: AttentionTrace,
}

pub struct PoolingGrads {
    pub last_frame: Matrix,
    pub video: Matrix,
    pub attention: AttentionWeights,
    /// `(dgamma, dbeta)` when the block has a norm.
    pub norm: Option<(Vec<f64>, Vec<f64>)>,
}

/// `last + A(last·W_Q, video·W_K, video·W_V)`; emits exactly as many tokens
/// as the last frame has.
pub fn frame_guided_pooling(last_frame: &TokenBundle, video: &TokenBundle, w: &FramePooling) -> Result<TokenBundle> {
    let (out, _) = frame_guided_pooling_forward(last_frame.tokens(), video.tokens(), w)?;
    TokenBundle::new(out, last_frame.class_token().map(<[f64]>::to_vec), last_frame.positional().cloned())
}

pub fn frame_guided_pooling_forward(last: &Matrix, video: &Matrix, w: &FramePooling) -> Result<(Matrix, PoolingTrace)> {
    if last.cols() != video.cols() {
        return Err(StaError::ShapeMismatch {
            op: "frame-guided pooling d_model",
            left: last.shape(),
            right: video.shape(),
        });
    }
    if last.rows() > video.rows() {
        return Err(StaError::invalid(
            "last_frame",
            format!("{} last-frame tokens exceed {} video tokens", last.rows(), video.rows()),
        ));
    }
    let (q_in, kv_in) = match &w.norm {
        Some(n) => (n.forward(last)?, n.forward(video)?),
        None => (last.clone(), video.clone()),
    };
    let (att, trace) = attend(&q_in, &kv_in, &w.attention)?;
    Ok((last.add(&att)?, PoolingTrace { last_frame: last.clone(), video: video.clone(), attention: trace }))
}

/// Reverse pass; the last-frame and video inputs are treated as independent.
pub fn frame_guided_pooling_backward(trace: &PoolingTrace, w: &FramePooling, d_out: &Matrix) -> Result<PoolingGrads> {
    let g = attend_backward(&trace.attention, &w.attention, d_out)?;
    let (d_last, d_video, norm) = match &w.norm {
        Some(n) => {
            let (dl, gl, bl) = n.backward(&trace.last_frame, &g.queries);
            let (dv, gv, bv) = n.backward(&trace.video, &g.keys_values);
            let dgamma = gl.iter().zip(&gv).map(|(a, b)| a + b).collect();
            let dbeta = bl.iter().zip(&bv).map(|(a, b)| a + b).collect();
            (dl, dv, Some((dgamma, dbeta)))
        }
        None => (g.queries, g.keys_values, None),
    };
    Ok(PoolingGrads { last_frame: d_last.add(d_out)?, video: d_video, attention: g.weights, norm })
}

impl PoolingTrace {
    /// Per-head attention maps.
    pub fn probabilities(&self) -> Vec<&Matrix> {
        self.attention.probabilities()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HeadWeights;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_output_projection_returns_last_frame() {
        let last = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let mut att = AttentionWeights::identity(2);
        att.set_output(Matrix::zeros(2, 2)).unwrap();
        let out = frame_guided_pooling(
            &TokenBundle::from_tokens(last.clone()),
            &TokenBundle::from_tokens(last.clone()),
            &FramePooling::new(att),
        )
        .unwrap();
        assert_eq!(out.tokens(), &last);
    }

    #[test]
    fn zero_values_returns_last_frame() {
        let last = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let video = m(&[&[0.2, 0.1], &[0.7, -0.4], &[1.0, 2.0], &[-3.0, 0.5]]);
        let mut att = AttentionWeights::identity(2);
        att.zero_values();
        let mut w = FramePooling::new(att);
        let out =
            frame_guided_pooling(&TokenBundle::from_tokens(last.clone()), &TokenBundle::from_tokens(video.clone()), &w)
                .unwrap();
        assert!(out.tokens().max_abs_diff(&last) <= 1e-12);
        w.norm = Some(LayerNormParams::standard(2));
        let out = frame_guided_pooling(&TokenBundle::from_tokens(last.clone()), &TokenBundle::from_tokens(video), &w)
            .unwrap();
        assert!(out.tokens().max_abs_diff(&last) <= 1e-12);
    }

    /// N=2 spatial tokens, t=2 frames, d=2. Hand-evaluated:
    /// Q = last·W_Q, K = video·W_K, V = video·W_V with 1 head, d_head = 2,
    /// scores scaled by 1/√2, softmax per row, then ·W_O and + last.
    #[test]
    fn two_frame_fixed_weights() {
        let last = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let video = m(&[&[0.0, 0.0], &[1.0, 1.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let att = AttentionWeights::new(
            vec![HeadWeights {
                query: m(&[&[1.0, 0.0], &[0.0, 1.0]]),
                key: m(&[&[2.0, 0.0], &[0.0, 2.0]]),
                value: m(&[&[1.0, 1.0], &[0.0, 1.0]]),
            }],
            m(&[&[0.5, 0.0], &[0.0, 0.5]]),
        )
        .unwrap();
        let out = frame_guided_pooling(
            &TokenBundle::from_tokens(last),
            &TokenBundle::from_tokens(video),
            &FramePooling::new(att),
        )
        .unwrap();

        // Row 0: q = (1,0); keys (0,0),(2,2),(2,0),(0,2) → scores (0,2,2,0)/√2.
        // values (0,0),(1,2),(1,1),(0,1).
        let s = std::f64::consts::SQRT_2; // 2/√2
        let (a, b) = (1.0, s.exp());
        let z = 2.0 * a + 2.0 * b;
        let row0 = [1.0 + 0.5 * (b * 1.0 + b * 1.0) / z, 0.5 * (b * 2.0 + b * 1.0 + a * 1.0) / z];
        // Row 1: q = (0,1) → scores (0,2,0,2)/√2.
        let row1 = [0.5 * (b * 1.0 + a * 1.0) / z, 1.0 + 0.5 * (b * 2.0 + a * 1.0 + b * 1.0) / z];
        let expect = m(&[&row0, &row1]);
        assert!(out.tokens().max_abs_diff(&expect) < 1e-14, "{:?}", out.tokens());
        assert_eq!(out.token_count(), 2);
    }

    #[test]
    fn too_many_last_frame_tokens() {
        let w = FramePooling::new(AttentionWeights::identity(2));
        let r = frame_guided_pooling(
            &TokenBundle::from_tokens(Matrix::zeros(3, 2)),
            &TokenBundle::from_tokens(Matrix::zeros(2, 2)),
            &w,
        );
        assert!(r.is_err());
    }

    #[test]
    fn attention_maps_are_stochastic() {
        let last = m(&[&[1.0, 3.0], &[-2.0, 0.5]]);
        let video = m(&[&[0.3, 0.1], &[4.0, -0.4], &[1.0, 2.0], &[-3.0, 0.5]]);
        let (_, trace) =
            frame_guided_pooling_forward(&last, &video, &FramePooling::new(AttentionWeights::identity(2))).unwrap();
        for p in trace.probabilities() {
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
