//! Dense row-major kernels shared by the rest of the crate.
//!
//! Everything is `f64` and every reduction runs in a fixed order, so results
//! are bit-reproducible across runs and thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StaError};

/// Row-major matrix of finite `f64` values. Rows are tokens, columns are channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = StaError;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        Matrix::new(r.rows, r.cols, r.data)
    }
}

impl From<Matrix> for MatrixRepr {
    fn from(m: Matrix) -> Self {
        MatrixRepr { rows: m.rows, cols: m.cols, data: m.data }
    }
}

fn check_finite(what: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(StaError::NonFinite { what, index }),
        None => Ok(()),
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(StaError::LengthMismatch { what: "matrix data", expected: rows * cols, actual: data.len() });
        }
        check_finite("matrix", &data)?;
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of arithmetic on already-valid matrices.
    pub(crate) fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(StaError::LengthMismatch { what: "matrix row", expected: cols, actual: row.len() });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec(rows, cols, data)
    }

    /// A single-row matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::new(1, v.len(), v.to_vec())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * k).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape("add", other)?;
        Ok(Matrix::from_vec(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect()))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a 1×cols row to every row.
    pub fn add_row_broadcast(&self, row: &[f64]) -> Result<Matrix> {
        if row.len() != self.cols {
            return Err(StaError::LengthMismatch { what: "broadcast row", expected: self.cols, actual: row.len() });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (a, b) in out.row_mut(r).iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Column sums, as a vector of length `cols`.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(StaError::ShapeMismatch { op: "vstack", left: self.shape(), right: other.shape() });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix::from_vec(self.rows + other.rows, self.cols, data))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |r, c| self.get(r, start + c))
    }

    /// Concatenates matrices side by side.
    pub fn hcat(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, Matrix::rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(StaError::ShapeMismatch { op: "hcat", left: parts[0].shape(), right: bad.shape() });
        }
        let cols = parts.iter().map(Matrix::cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(StaError::ShapeMismatch { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }
}

/// Matrix product with left-to-right summation over the inner dimension.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(StaError::ShapeMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(Matrix::from_vec(a.rows, b.cols, out))
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(StaError::ShapeMismatch { op: "matmul_bt", left: a.shape(), right: b.shape() });
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |i, j| a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum()))
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(StaError::ShapeMismatch { op: "matmul_at", left: a.shape(), right: b.shape() });
    }
    let mut out = vec![0.0; a.cols * b.cols];
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, aki) in a_row.iter().enumerate() {
            let out_row = &mut out[i * b.cols..(i + 1) * b.cols];
            for (o, bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    Ok(Matrix::from_vec(a.cols, b.cols, out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Per-row normalization with population variance followed by `gamma * x + beta`.
pub fn layer_norm(m: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    for (what, v) in [("layer_norm gamma", gamma), ("layer_norm beta", beta)] {
        if v.len() != m.cols {
            return Err(StaError::LengthMismatch { what, expected: m.cols, actual: v.len() });
        }
    }
    if !(eps > 0.0) {
        return Err(StaError::invalid("eps", "must be > 0"));
    }
    let mut out = m.clone();
    let n = m.cols as f64;
    for r in 0..m.rows {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = gamma[i] * ((*v - mean) * inv_std) + beta[i];
        }
    }
    Ok(out)
}

/// 3×3 kernel applied per channel, indexed `[dy][dx]` with the center at `[1][1]`.
pub type Kernel3 = [[f64; 3]; 3];

pub const IDENTITY_KERNEL: Kernel3 = [[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];

/// Height × width × channels raster, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl TryFrom<GridRepr> for Grid {
    type Error = StaError;

    fn try_from(r: GridRepr) -> Result<Self> {
        Grid::new(r.h, r.w, r.c, r.data)
    }
}

impl From<Grid> for GridRepr {
    fn from(g: Grid) -> Self {
        GridRepr { h: g.height, w: g.width, c: g.channels, data: g.data }
    }
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(StaError::LengthMismatch {
                what: "grid data",
                expected: height * width * channels,
                actual: data.len(),
            });
        }
        check_finite("grid", &data)?;
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + ch]
    }

    fn at_mut(&mut self, y: usize, x: usize, ch: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + ch]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    pub fn add(&self, other: &Grid) -> Result<Grid> {
        if !self.same_shape(other) {
            return Err(StaError::ShapeMismatch {
                op: "grid add",
                left: (self.height, self.width * self.channels),
                right: (other.height, other.width * other.channels),
            });
        }
        Ok(Grid { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(), ..*self })
    }

    /// Zero-padded, stride-1, per-channel 3×3 cross-correlation.
    pub fn conv3x3(&self, kernel: &Kernel3) -> Grid {
        let mut out = Grid::zeros(self.height, self.width, self.channels);
        let (h, w) = (self.height as isize, self.width as isize);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..self.channels {
                    let mut acc = 0.0;
                    for (ky, krow) in kernel.iter().enumerate() {
                        for (kx, k) in krow.iter().enumerate() {
                            let sy = y + ky as isize - 1;
                            let sx = x + kx as isize - 1;
                            if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                acc += k * self.get(sy as usize, sx as usize, ch);
                            }
                        }
                    }
                    *out.at_mut(y as usize, x as usize, ch) = acc;
                }
            }
        }
        out
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Source coordinate and blend weight along one axis under the half-pixel
/// convention, clamped to the edge.
fn half_pixel_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Channel-wise bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(g: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    if out_h == 0 || out_w == 0 {
        return Err(StaError::invalid("target size", "must be at least 1×1"));
    }
    if g.height == 0 || g.width == 0 {
        return Err(StaError::invalid("source size", "grid is empty"));
    }
    if (out_h, out_w) == (g.height, g.width) {
        return Ok(g.clone());
    }
    let mut out = Grid::zeros(out_h, out_w, g.channels);
    for y in 0..out_h {
        let (y0, y1, fy) = half_pixel_taps(y, g.height, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = half_pixel_taps(x, g.width, out_w);
            for ch in 0..g.channels {
                let top = lerp(g.get(y0, x0, ch), g.get(y0, x1, ch), fx);
                let bottom = lerp(g.get(y1, x0, ch), g.get(y1, x1, ch), fx);
                *out.at_mut(y, x, ch) = lerp(top, bottom, fy);
            }
        }
    }
    Ok(out)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}
