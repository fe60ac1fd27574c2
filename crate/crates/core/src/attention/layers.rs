//! Building blocks with hand-written reverse passes: multi-head cross-attention,
//! layer normalization and the residual MLP.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, StaError};
use crate::tensor::{matmul, matmul_at, matmul_bt, softmax_rows, Matrix};

/// Named tensors. Used for weight files and for gradient bookkeeping; the
/// gradient of a parameter is stored under the parameter's own name.
pub type Tensors = BTreeMap<String, Matrix>;

pub(crate) fn fetch<'a>(t: &'a Tensors, name: &str) -> Result<&'a Matrix> {
    t.get(name).ok_or_else(|| StaError::MissingTensor(name.to_string()))
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

/// Per-head `W_Q`, `W_K`, `W_V` (each `d_model × d_head`) and the shared
/// output projection `W_O` (`heads·d_head × d_model`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    heads: Vec<HeadWeights>,
    output: Matrix,
}

impl AttentionWeights {
    pub fn new(heads: Vec<HeadWeights>, output: Matrix) -> Result<Self> {
        let first = heads.first().ok_or_else(|| StaError::invalid("heads", "at least one head is required"))?;
        let shape = first.query.shape();
        for h in &heads {
            for m in [&h.query, &h.key, &h.value] {
                if m.shape() != shape {
                    return Err(StaError::ShapeMismatch {
                        op: "attention head weights",
                        left: shape,
                        right: m.shape(),
                    });
                }
            }
        }
        let expected = (heads.len() * shape.1, shape.0);
        if output.shape() != expected {
            return Err(StaError::ShapeMismatch {
                op: "attention output projection",
                left: expected,
                right: output.shape(),
            });
        }
        Ok(Self { heads, output })
    }

    /// One head, every projection the identity.
    pub fn identity(d_model: usize) -> Self {
        let eye = Matrix::identity(d_model);
        Self { heads: vec![HeadWeights { query: eye.clone(), key: eye.clone(), value: eye.clone() }], output: eye }
    }

    pub fn random(rng: &mut impl Rng, d_model: usize, heads: usize, d_head: usize) -> Self {
        let s = 1.0 / (d_model as f64).sqrt();
        let heads = (0..heads)
            .map(|_| HeadWeights {
                query: random_matrix(rng, d_model, d_head, s),
                key: random_matrix(rng, d_model, d_head, s),
                value: random_matrix(rng, d_model, d_head, s),
            })
            .collect::<Vec<_>>();
        let output = random_matrix(rng, heads.len() * d_head, d_model, s);
        Self { heads, output }
    }

    pub fn heads(&self) -> &[HeadWeights] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [HeadWeights] {
        &mut self.heads
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn set_output(&mut self, output: Matrix) -> Result<()> {
        if output.shape() != self.output.shape() {
            return Err(StaError::ShapeMismatch {
                op: "attention output projection",
                left: self.output.shape(),
                right: output.shape(),
            });
        }
        self.output = output;
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].query.rows()
    }

    pub fn d_head(&self) -> usize {
        self.heads[0].query.cols()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Zeroes every `W_V`, which reduces the block to its residual path.
    pub fn zero_values(&mut self) {
        for h in &mut self.heads {
            h.value = Matrix::zeros(h.value.rows(), h.value.cols());
        }
    }

    pub fn write_tensors(&self, prefix: &str, out: &mut Tensors) {
        for (i, h) in self.heads.iter().enumerate() {
            out.insert(format!("{prefix}w_q.h{i}"), h.query.clone());
            out.insert(format!("{prefix}w_k.h{i}"), h.key.clone());
            out.insert(format!("{prefix}w_v.h{i}"), h.value.clone());
        }
        out.insert(format!("{prefix}w_o"), self.output.clone());
    }

    pub fn read_tensors(prefix: &str, t: &Tensors) -> Result<Self> {
        let mut heads = Vec::new();
        while t.contains_key(&format!("{prefix}w_q.h{}", heads.len())) {
            let i = heads.len();
            heads.push(HeadWeights {
                query: fetch(t, &format!("{prefix}w_q.h{i}"))?.clone(),
                key: fetch(t, &format!("{prefix}w_k.h{i}"))?.clone(),
                value: fetch(t, &format!("{prefix}w_v.h{i}"))?.clone(),
            });
        }
        if heads.is_empty() {
            return Err(StaError::MissingTensor(format!("{prefix}w_q.h0")));
        }
        Self::new(heads, fetch(t, &format!("{prefix}w_o"))?.clone())
    }
}

struct HeadTrace {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
}

/// Intermediate values of one attention forward pass, kept for the reverse pass.
pub struct AttentionTrace {
    q_in: Matrix,
    kv_in: Matrix,
    heads: Vec<HeadTrace>,
    concat: Matrix,
}

impl AttentionTrace {
    /// Softmax attention weights, one `queries × keys` matrix per head.
    pub fn probabilities(&self) -> Vec<&Matrix> {
        self.heads.iter().map(|h| &h.probs).collect()
    }
}

pub struct AttentionGrads {
    pub queries: Matrix,
    pub keys_values: Matrix,
    pub weights: AttentionWeights,
}

/// `concat_h(softmax(Q_h K_hᵀ / √d_head) V_h) · W_O`, without the residual.
pub fn attend(q_in: &Matrix, kv_in: &Matrix, w: &AttentionWeights) -> Result<(Matrix, AttentionTrace)> {
    let d_model = w.d_model();
    for m in [q_in, kv_in] {
        if m.cols() != d_model {
            return Err(StaError::ShapeMismatch {
                op: "attention input",
                left: m.shape(),
                right: (w.d_model(), w.d_head()),
            });
        }
    }
    let scale = 1.0 / (w.d_head() as f64).sqrt();
    let mut heads = Vec::with_capacity(w.head_count());
    let mut outs = Vec::with_capacity(w.head_count());
    for h in &w.heads {
        let q = matmul(q_in, &h.query)?;
        let k = matmul(kv_in, &h.key)?;
        let v = matmul(kv_in, &h.value)?;
        let probs = softmax_rows(&matmul_bt(&q, &k)?.scale(scale));
        outs.push(matmul(&probs, &v)?);
        heads.push(HeadTrace { q, k, v, probs });
    }
    let concat = Matrix::hcat(&outs)?;
    let out = matmul(&concat, &w.output)?;
    Ok((out, AttentionTrace { q_in: q_in.clone(), kv_in: kv_in.clone(), heads, concat }))
}

/// Reverse pass of [`attend`].
pub fn attend_backward(trace: &AttentionTrace, w: &AttentionWeights, d_out: &Matrix) -> Result<AttentionGrads> {
    let d_head = w.d_head();
    let scale = 1.0 / (d_head as f64).sqrt();
    let d_output = matmul_at(&trace.concat, d_out)?;
    let d_concat = matmul_bt(d_out, &w.output)?;

    let mut d_q_in = Matrix::zeros(trace.q_in.rows(), trace.q_in.cols());
    let mut d_kv_in = Matrix::zeros(trace.kv_in.rows(), trace.kv_in.cols());
    let mut head_grads = Vec::with_capacity(w.head_count());
    for (i, (h, hw)) in trace.heads.iter().zip(&w.heads).enumerate() {
        let d_head_out = d_concat.slice_cols(i * d_head, (i + 1) * d_head);
        let d_probs = matmul_bt(&d_head_out, &h.v)?;
        let d_v = matmul_at(&h.probs, &d_head_out)?;
        let d_scores = softmax_backward(&h.probs, &d_probs).scale(scale);
        let d_q = matmul(&d_scores, &h.k)?;
        let d_k = matmul_at(&d_scores, &h.q)?;

        d_q_in.add_assign(&matmul_bt(&d_q, &hw.query)?)?;
        d_kv_in.add_assign(&matmul_bt(&d_k, &hw.key)?)?;
        d_kv_in.add_assign(&matmul_bt(&d_v, &hw.value)?)?;
        head_grads.push(HeadWeights {
            query: matmul_at(&trace.q_in, &d_q)?,
            key: matmul_at(&trace.kv_in, &d_k)?,
            value: matmul_at(&trace.kv_in, &d_v)?,
        });
    }
    Ok(AttentionGrads {
        queries: d_q_in,
        keys_values: d_kv_in,
        weights: AttentionWeights { heads: head_grads, output: d_output },
    })
}

/// Row-wise softmax Jacobian-vector product: `p ⊙ (g − Σ p g)`.
fn softmax_backward(probs: &Matrix, grad: &Matrix) -> Matrix {
    Matrix::from_fn(probs.rows(), probs.cols(), |r, c| {
        let dot: f64 = probs.row(r).iter().zip(grad.row(r)).map(|(p, g)| p * g).sum();
        probs.get(r, c) * (grad.get(r, c) - dot)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn standard(d: usize) -> Self {
        Self { gamma: vec![1.0; d], beta: vec![0.0; d], eps: LAYER_NORM_EPS }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        crate::tensor::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, x: &Matrix, dy: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
        let d = x.cols();
        let n = d as f64;
        let mut dx = Matrix::zeros(x.rows(), d);
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + self.eps).sqrt();
            let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
            let dxhat: Vec<f64> = (0..d).map(|c| dy.get(r, c) * self.gamma[c]).collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / n;
            let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
            for c in 0..d {
                dx.set(r, c, inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat));
                dgamma[c] += dy.get(r, c) * xhat[c];
                dbeta[c] += dy.get(r, c);
            }
        }
        (dx, dgamma, dbeta)
    }

    pub fn write_tensors(&self, prefix: &str, out: &mut Tensors) {
        out.insert(format!("{prefix}gamma"), Matrix::from_vec(1, self.gamma.len(), self.gamma.clone()));
        out.insert(format!("{prefix}beta"), Matrix::from_vec(1, self.beta.len(), self.beta.clone()));
    }

    /// `None` when the prefix has no `gamma` entry.
    pub fn read_tensors(prefix: &str, t: &Tensors, eps: f64) -> Result<Option<Self>> {
        let Some(gamma) = t.get(&format!("{prefix}gamma")) else {
            return Ok(None);
        };
        let beta = fetch(t, &format!("{prefix}beta"))?;
        if gamma.shape() != beta.shape() || gamma.rows() != 1 {
            return Err(StaError::ShapeMismatch {
                op: "layer norm parameters",
                left: gamma.shape(),
                right: beta.shape(),
            });
        }
        Ok(Some(Self { gamma: gamma.data().to_vec(), beta: beta.data().to_vec(), eps }))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `x + gelu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
}

pub struct MlpTrace {
    pre_activation: Matrix,
    activation: Matrix,
    input: Matrix,
}

impl ResidualMlp {
    pub fn new(hidden: Matrix, hidden_bias: Vec<f64>, output: Matrix, output_bias: Vec<f64>) -> Result<Self> {
        let (d, width) = hidden.shape();
        if output.shape() != (width, d) {
            return Err(StaError::ShapeMismatch { op: "mlp layers", left: hidden.shape(), right: output.shape() });
        }
        if hidden_bias.len() != width || output_bias.len() != d {
            return Err(StaError::LengthMismatch {
                what: "mlp bias",
                expected: if hidden_bias.len() != width { width } else { d },
                actual: if hidden_bias.len() != width { hidden_bias.len() } else { output_bias.len() },
            });
        }
        Ok(Self { hidden, hidden_bias, output, output_bias })
    }

    pub fn zeros(d_model: usize, width: usize) -> Self {
        Self {
            hidden: Matrix::zeros(d_model, width),
            hidden_bias: vec![0.0; width],
            output: Matrix::zeros(width, d_model),
            output_bias: vec![0.0; d_model],
        }
    }

    pub fn random(rng: &mut impl Rng, d_model: usize, width: usize) -> Self {
        let s1 = 1.0 / (d_model as f64).sqrt();
        let s2 = 1.0 / (width as f64).sqrt();
        Self {
            hidden: random_matrix(rng, d_model, width, s1),
            hidden_bias: (0..width).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            output: random_matrix(rng, width, d_model, s2),
            output_bias: (0..d_model).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.hidden.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpTrace)> {
        let pre = matmul(x, &self.hidden)?.add_row_broadcast(&self.hidden_bias)?;
        let act = Matrix::from_vec(pre.rows(), pre.cols(), pre.data().iter().map(|&v| gelu(v)).collect());
        let y = matmul(&act, &self.output)?.add_row_broadcast(&self.output_bias)?.add(x)?;
        Ok((y, MlpTrace { pre_activation: pre, activation: act, input: x.clone() }))
    }

    /// Returns the input gradient (including the residual path) and the
    /// parameter gradients packed as a `ResidualMlp`.
    pub fn backward(&self, trace: &MlpTrace, dy: &Matrix) -> Result<(Matrix, ResidualMlp)> {
        let d_output = matmul_at(&trace.activation, dy)?;
        let d_output_bias = dy.column_sums();
        let d_act = matmul_bt(dy, &self.output)?;
        let d_pre = Matrix::from_vec(
            d_act.rows(),
            d_act.cols(),
            d_act.data().iter().zip(trace.pre_activation.data()).map(|(g, &x)| g * gelu_derivative(x)).collect(),
        );
        let d_hidden = matmul_at(&trace.input, &d_pre)?;
        let d_hidden_bias = d_pre.column_sums();
        let dx = matmul_bt(&d_pre, &self.hidden)?.add(dy)?;
        Ok((
            dx,
            ResidualMlp { hidden: d_hidden, hidden_bias: d_hidden_bias, output: d_output, output_bias: d_output_bias },
        ))
    }

    pub fn write_tensors(&self, prefix: &str, out: &mut Tensors) {
        out.insert(format!("{prefix}mlp.0"), self.hidden.clone());
        out.insert(
            format!("{prefix}mlp.0.bias"),
            Matrix::from_vec(1, self.hidden_bias.len(), self.hidden_bias.clone()),
        );
        out.insert(format!("{prefix}mlp.1"), self.output.clone());
        out.insert(
            format!("{prefix}mlp.1.bias"),
            Matrix::from_vec(1, self.output_bias.len(), self.output_bias.clone()),
        );
    }

    pub fn read_tensors(prefix: &str, t: &Tensors) -> Result<Self> {
        Self::new(
            fetch(t, &format!("{prefix}mlp.0"))?.clone(),
            fetch(t, &format!("{prefix}mlp.0.bias"))?.data().to_vec(),
            fetch(t, &format!("{prefix}mlp.1"))?.clone(),
            fetch(t, &format!("{prefix}mlp.1.bias"))?.data().to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn weights_validate_shapes() {
        let h = HeadWeights { query: Matrix::zeros(4, 2), key: Matrix::zeros(4, 2), value: Matrix::zeros(4, 3) };
        assert!(AttentionWeights::new(vec![h], Matrix::zeros(2, 4)).is_err());
        assert!(AttentionWeights::new(vec![], Matrix::zeros(2, 4)).is_err());
        let h = HeadWeights { query: Matrix::zeros(4, 2), key: Matrix::zeros(4, 2), value: Matrix::zeros(4, 2) };
        assert!(AttentionWeights::new(vec![h.clone(), h.clone()], Matrix::zeros(2, 4)).is_err());
        assert!(AttentionWeights::new(vec![h.clone(), h], Matrix::zeros(4, 4)).is_ok());
    }

    #[test]
    fn tensor_names_round_trip() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = AttentionWeights::random(&mut rng, 4, 2, 3);
        let mut t = Tensors::new();
        w.write_tensors("", &mut t);
        assert!(t.contains_key("w_q.h0") && t.contains_key("w_v.h1") && t.contains_key("w_o"));
        assert_eq!(AttentionWeights::read_tensors("", &t).unwrap(), w);

        let mlp = ResidualMlp::random(&mut rng, 4, 16);
        mlp.write_tensors("x.", &mut t);
        assert!(t.contains_key("x.mlp.0"));
        assert_eq!(ResidualMlp::read_tensors("x.", &t).unwrap(), mlp);
    }

    #[test]
    fn zero_mlp_is_identity() {
        let x = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.3 - 1.0);
        let (y, _) = ResidualMlp::zeros(4, 16).forward(&x).unwrap();
        assert_eq!(y, x);
    }
}
