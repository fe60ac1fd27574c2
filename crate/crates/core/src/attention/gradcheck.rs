//! Central finite-difference verification of the analytic reverse passes.
//!
//! Each operation is flattened into a set of named tensors (inputs and
//! weights alike), so the checker is a single loop over every scalar. The
//! loss is `Σ out² / 2`, whose output gradient is the output itself.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dual::{dual_attention_backward, dual_attention_forward, DualAttentionWeights};
use super::layers::{fetch, AttentionWeights, LayerNormParams, ResidualMlp, Tensors, LAYER_NORM_EPS};
use super::pooling::{frame_guided_pooling_backward, frame_guided_pooling_forward, FramePooling};
use super::{mha_backward, mha_forward, TokenBundle};
use crate::error::{Result, StaError};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpId {
    Mha,
    FrameGuidedPooling,
    DualAttention,
}

impl FromStr for OpId {
    type Err = StaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mha" => Ok(OpId::Mha),
            "frame_guided_pooling" | "pooling" => Ok(OpId::FrameGuidedPooling),
            "dual_attention" | "dual" => Ok(OpId::DualAttention),
            other => Err(StaError::UnknownOp(other.to_string())),
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OpId::Mha => "mha",
            OpId::FrameGuidedPooling => "frame_guided_pooling",
            OpId::DualAttention => "dual_attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: OpId,
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub parameters_checked: usize,
    pub worst_tensor: String,
    pub worst_index: usize,
}

fn loss_of(m: &Matrix) -> f64 {
    0.5 * m.data().iter().map(|v| v * v).sum::<f64>()
}

fn insert_vec(t: &mut Tensors, name: &str, v: &[f64]) {
    t.insert(name.to_string(), Matrix::from_vec(1, v.len(), v.to_vec()));
}

/// Loss and, when `with_grad` is set, the gradient of every tensor in `t`.
pub fn loss_and_grads(op: OpId, t: &Tensors, with_grad: bool) -> Result<(f64, Option<Tensors>)> {
    match op {
        OpId::Mha => {
            let q = fetch(t, "queries")?;
            let kv = fetch(t, "keys_values")?;
            let w = AttentionWeights::read_tensors("", t)?;
            let (out, trace) = mha_forward(q, kv, &w)?;
            if !with_grad {
                return Ok((loss_of(&out), None));
            }
            let g = mha_backward(&trace, &w, &out)?;
            let mut grads = Tensors::new();
            grads.insert("queries".into(), g.queries);
            grads.insert("keys_values".into(), g.keys_values);
            g.weights.write_tensors("", &mut grads);
            Ok((loss_of(&out), Some(grads)))
        }
        OpId::FrameGuidedPooling => {
            let last = fetch(t, "last_frame")?;
            let video = fetch(t, "video")?;
            let w = FramePooling {
                attention: AttentionWeights::read_tensors("", t)?,
                norm: LayerNormParams::read_tensors("norm.", t, LAYER_NORM_EPS)?,
            };
            let (out, trace) = frame_guided_pooling_forward(last, video, &w)?;
            if !with_grad {
                return Ok((loss_of(&out), None));
            }
            let g = frame_guided_pooling_backward(&trace, &w, &out)?;
            let mut grads = Tensors::new();
            grads.insert("last_frame".into(), g.last_frame);
            grads.insert("video".into(), g.video);
            g.attention.write_tensors("", &mut grads);
            if let Some((dg, db)) = g.norm {
                insert_vec(&mut grads, "norm.gamma", &dg);
                insert_vec(&mut grads, "norm.beta", &db);
            }
            Ok((loss_of(&out), Some(grads)))
        }
        OpId::DualAttention => {
            let image = bundle_from(t, "image.")?;
            let video = bundle_from(t, "video.")?;
            let w = DualAttentionWeights {
                image_guided: AttentionWeights::read_tensors("i2v.", t)?,
                video_guided: AttentionWeights::read_tensors("v2i.", t)?,
                image_mlp: ResidualMlp::read_tensors("image.", t)?,
                video_mlp: ResidualMlp::read_tensors("video.", t)?,
                image_norm: LayerNormParams::read_tensors("image.norm.", t, LAYER_NORM_EPS)?,
                video_norm: LayerNormParams::read_tensors("video.norm.", t, LAYER_NORM_EPS)?,
            };
            let (oi, ov, trace) = dual_attention_forward(&image, &video, &w)?;
            let loss = loss_of(&oi) + loss_of(&ov);
            if !with_grad {
                return Ok((loss, None));
            }
            let g = dual_attention_backward(&trace, &w, &oi, &ov)?;
            let mut grads = Tensors::new();
            grads.insert("image.tokens".into(), g.image_tokens);
            insert_vec(&mut grads, "image.class", &g.image_class);
            grads.insert("video.tokens".into(), g.video_tokens);
            insert_vec(&mut grads, "video.class", &g.video_class);
            if t.contains_key("image.pos") {
                grads.insert("image.pos".into(), g.image_positional);
            }
            if t.contains_key("video.pos") {
                grads.insert("video.pos".into(), g.video_positional);
            }
            g.weights.image_guided.write_tensors("i2v.", &mut grads);
            g.weights.video_guided.write_tensors("v2i.", &mut grads);
            g.weights.image_mlp.write_tensors("image.", &mut grads);
            g.weights.video_mlp.write_tensors("video.", &mut grads);
            if let Some(n) = &g.weights.image_norm {
                n.write_tensors("image.norm.", &mut grads);
            }
            if let Some(n) = &g.weights.video_norm {
                n.write_tensors("video.norm.", &mut grads);
            }
            Ok((loss, Some(grads)))
        }
    }
}

fn bundle_from(t: &Tensors, prefix: &str) -> Result<TokenBundle> {
    let tokens = fetch(t, &format!("{prefix}tokens"))?.clone();
    let class = fetch(t, &format!("{prefix}class"))?.data().to_vec();
    let pos = t.get(&format!("{prefix}pos")).cloned();
    TokenBundle::new(tokens, Some(class), pos)
}

/// Compares analytic gradients against central differences for every scalar
/// in `tensors`. Relative error uses `max(|a|, |b|, 1e-8)` as denominator.
pub fn grad_check(op: OpId, tensors: &Tensors, epsilon: f64) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(StaError::invalid("epsilon", "must be > 0"));
    }
    let (_, analytic) = loss_and_grads(op, tensors, true)?;
    let analytic = analytic.expect("gradient requested");

    let mut report = GradCheckReport {
        op,
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        parameters_checked: 0,
        worst_tensor: String::new(),
        worst_index: 0,
    };
    let mut probe = tensors.clone();
    for (name, base) in tensors {
        let grad = analytic.get(name).ok_or_else(|| StaError::MissingTensor(format!("gradient of {name}")))?;
        for i in 0..base.data().len() {
            let x = base.data()[i];
            probe.get_mut(name).expect("same keys").data_mut()[i] = x + epsilon;
            let (plus, _) = loss_and_grads(op, &probe, false)?;
            probe.get_mut(name).expect("same keys").data_mut()[i] = x - epsilon;
            let (minus, _) = loss_and_grads(op, &probe, false)?;
            probe.get_mut(name).expect("same keys").data_mut()[i] = x;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.parameters_checked += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if report.parameters_checked == 1 || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Sizes for a randomly generated grad-check case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_head: usize,
    /// Query tokens (`mha`), last-frame tokens (pooling) or spatial tokens per side (dual).
    pub query_tokens: usize,
    /// Key/value tokens (`mha`) or frames in the clip (pooling). Unused by dual.
    pub key_tokens: usize,
    pub mlp_width: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self { d_model: 8, heads: 2, d_head: 4, query_tokens: 4, key_tokens: 4, mlp_width: 32 }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Random inputs and weights for `op`, deterministic in `seed`.
pub fn random_case(op: OpId, seed: u64, dims: GradCheckDims) -> Tensors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.d_model;
    let mut t = Tensors::new();
    match op {
        OpId::Mha => {
            t.insert("queries".into(), random_matrix(&mut rng, dims.query_tokens, d));
            t.insert("keys_values".into(), random_matrix(&mut rng, dims.key_tokens, d));
            AttentionWeights::random(&mut rng, d, dims.heads, dims.d_head).write_tensors("", &mut t);
        }
        OpId::FrameGuidedPooling => {
            let frames = dims.key_tokens.max(1);
            let video = random_matrix(&mut rng, dims.query_tokens * frames, d);
            // the last frame is the trailing block of the clip
            let last = video.slice_rows(dims.query_tokens * (frames - 1), dims.query_tokens * frames);
            t.insert("video".into(), video);
            t.insert("last_frame".into(), last);
            AttentionWeights::random(&mut rng, d, dims.heads, dims.d_head).write_tensors("", &mut t);
        }
        OpId::DualAttention => {
            let n = dims.query_tokens;
            for side in ["image.", "video."] {
                t.insert(format!("{side}tokens"), random_matrix(&mut rng, n, d).scale(0.25));
                t.insert(format!("{side}class"), random_matrix(&mut rng, 1, d).scale(0.25));
                t.insert(format!("{side}pos"), random_matrix(&mut rng, n + 1, d).scale(0.1));
            }
            let w = DualAttentionWeights::random(&mut rng, d, dims.heads, dims.d_head, dims.mlp_width);
            w.image_guided.write_tensors("i2v.", &mut t);
            w.video_guided.write_tensors("v2i.", &mut t);
            w.image_mlp.write_tensors("image.", &mut t);
            w.video_mlp.write_tensors("video.", &mut t);
            // perturb the affine part so its gradients are exercised away from the identity
            let gamma = Matrix::from_fn(1, d, |_, _| 1.0 + rng.gen_range(-0.2..0.2));
            let beta = Matrix::from_fn(1, d, |_, _| rng.gen_range(-0.2..0.2));
            let gamma_v = Matrix::from_fn(1, d, |_, _| 1.0 + rng.gen_range(-0.2..0.2));
            let beta_v = Matrix::from_fn(1, d, |_, _| rng.gen_range(-0.2..0.2));
            t.insert("image.norm.gamma".into(), gamma);
            t.insert("image.norm.beta".into(), beta);
            t.insert("video.norm.gamma".into(), gamma_v);
            t.insert("video.norm.beta".into(), beta_v);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_ids_parse() {
        assert_eq!("mha".parse::<OpId>().unwrap(), OpId::Mha);
        assert_eq!("frame_guided_pooling".parse::<OpId>().unwrap(), OpId::FrameGuidedPooling);
        assert_eq!("dual_attention".parse::<OpId>().unwrap(), OpId::DualAttention);
        assert!(matches!("conv".parse::<OpId>(), Err(StaError::UnknownOp(_))));
    }

    #[test]
    fn single_key_is_exact_up_to_truncation() {
        let dims = GradCheckDims { d_model: 4, heads: 1, d_head: 4, query_tokens: 3, key_tokens: 1, mlp_width: 0 };
        let t = random_case(OpId::Mha, 3, dims);
        // with one key the loss is exactly quadratic along every coordinate, so a
        // wide step has no truncation error and keeps cancellation small
        let r = grad_check(OpId::Mha, &t, 1e-2).unwrap();
        assert!(r.max_relative_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn mha_two_heads() {
        let t = random_case(OpId::Mha, 17, GradCheckDims::default());
        let r = grad_check(OpId::Mha, &t, 1e-5).unwrap();
        assert!(r.max_relative_error <= 1e-5, "{r:?}");
        assert_eq!(r.parameters_checked, 2 * 4 * 8 + 3 * 2 * 8 * 4 + 8 * 8);
    }

    #[test]
    fn pooling_with_and_without_norm() {
        let dims = GradCheckDims { key_tokens: 3, ..GradCheckDims::default() };
        let mut t = random_case(OpId::FrameGuidedPooling, 8, dims);
        let r = grad_check(OpId::FrameGuidedPooling, &t, 1e-5).unwrap();
        assert!(r.max_relative_error <= 1e-5, "{r:?}");
        t.insert("norm.gamma".into(), Matrix::from_fn(1, 8, |_, c| 1.0 + 0.05 * c as f64));
        t.insert("norm.beta".into(), Matrix::from_fn(1, 8, |_, c| 0.02 * c as f64));
        let r = grad_check(OpId::FrameGuidedPooling, &t, 1e-5).unwrap();
        assert!(r.max_relative_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn dual_three_plus_one_tokens() {
        let dims = GradCheckDims { query_tokens: 3, ..GradCheckDims::default() };
        let t = random_case(OpId::DualAttention, 5, dims);
        let r = grad_check(OpId::DualAttention, &t, 1e-5).unwrap();
        assert!(r.max_relative_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let t = random_case(OpId::Mha, 1, GradCheckDims::default());
        assert!(grad_check(OpId::Mha, &t, 0.0).is_err());
    }
}
