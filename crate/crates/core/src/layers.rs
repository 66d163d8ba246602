//! Layer primitives as pure functions over caller-owned parameters.
//!
//! Shapes follow one convention throughout: activations are `batch x width`
//! matrices, one sample per row. Dense layers fold the bias into the weight
//! matrix as a final column, so a layer mapping `n_in` to `n_out` stores
//! `n_out x (n_in + 1)` weights and computes `out[b] = W * [h[b]; 1]`.
//!
//! Backward functions take the same inputs the forward saw plus the gradient
//! of the loss with respect to their output, and return parameter gradients
//! alongside the input gradient. All reductions run in a fixed order
//! (ascending over the summed index, batch rows ascending) so results are
//! bit-reproducible.

use crate::numerics::{Matrix, Rng};
use crate::{Error, Result};

/// Guard used inside `max(||h||, epsilon)` by default.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Dense (fully connected) layer parameters with folded bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `n_out x (n_in + 1)`; the last column is the bias.
    pub weights: Matrix,
}

impl DenseParams {
    pub fn new(weights: Matrix) -> Result<DenseParams> {
        if weights.rows() == 0 || weights.cols() < 2 {
            return Err(Error::Config(format!(
                "dense weights must be n_out x (n_in + 1) with n_out, n_in >= 1, got {}",
                weights.shape_str()
            )));
        }
        Ok(DenseParams { weights })
    }

    /// Gaussian(0, stddev) weights, bias column zero. Draws run row-major
    /// over the weight block only, so the stream position is independent of
    /// the bias column.
    pub fn gaussian(rng: &mut Rng, n_out: usize, n_in: usize, stddev: f64) -> DenseParams {
        let mut weights = Matrix::zeros(n_out, n_in + 1);
        for r in 0..n_out {
            let row = weights.row_mut(r);
            for w in row[..n_in].iter_mut() {
                *w = stddev * rng.next_gaussian();
            }
        }
        DenseParams { weights }
    }

    pub fn n_in(&self) -> usize {
        self.weights.cols() - 1
    }

    pub fn n_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.rows() * self.weights.cols()
    }
}

/// Per-channel learned scaling applied after per-sample L2 normalization:
/// `y_i = gamma_i * h_i / max(||h||_2, epsilon)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormScaleParams {
    pub gamma: Vec<f64>,
    pub epsilon: f64,
}

impl NormScaleParams {
    pub fn new(gamma: Vec<f64>, epsilon: f64) -> Result<NormScaleParams> {
        if gamma.is_empty() {
            return Err(Error::Config("normscale gamma must be non-empty".into()));
        }
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::Config(format!(
                "normscale epsilon must be a positive real, got {epsilon}"
            )));
        }
        Ok(NormScaleParams { gamma, epsilon })
    }

    /// All channels initialized to the same scale rho.
    pub fn constant(width: usize, rho: f64) -> Result<NormScaleParams> {
        NormScaleParams::new(vec![rho; width], DEFAULT_EPSILON)
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }
}

/// Gradients produced by `dense_backward`.
#[derive(Clone, Debug)]
pub struct DenseGrad {
    /// Same shape as the weights, summed over the batch.
    pub d_weights: Matrix,
    pub d_input: Matrix,
}

/// Gradients produced by `normscale_backward`.
#[derive(Clone, Debug)]
pub struct NormScaleGrad {
    /// Per channel, summed over the batch.
    pub d_gamma: Vec<f64>,
    pub d_input: Matrix,
}

fn check_width(op: &'static str, expected: usize, h: &Matrix) -> Result<()> {
    if h.cols() != expected {
        return Err(Error::shape(
            op,
            format!("width {expected}"),
            h.shape_str(),
        ));
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape_str(), b.shape_str()));
    }
    Ok(())
}

/// `out[b] = W * [h[b]; 1]`.
///
/// Each output element accumulates `w[o][k] * h[b][k]` for k ascending, then
/// adds the bias last; rows of the batch are independent, so a batch call is
/// bitwise identical to stacking single-row calls.
pub fn dense_forward(p: &DenseParams, h_in: &Matrix) -> Result<Matrix> {
    check_width("dense_forward", p.n_in(), h_in)?;
    let (batch, n_in) = h_in.shape();
    let n_out = p.n_out();
    // k-major copy of the weights so the inner loop runs over contiguous
    // output channels; the per-element addition order is unchanged.
    let wt = p.weights.transposed();
    let mut out = Matrix::zeros(batch, n_out);
    for b in 0..batch {
        let h_row = h_in.row(b);
        let out_row = out.row_mut(b);
        for (k, &hv) in h_row.iter().enumerate() {
            for (o, &w) in out_row.iter_mut().zip(wt.row(k)) {
                *o += hv * w;
            }
        }
        for (o, &w) in out_row.iter_mut().zip(wt.row(n_in)) {
            *o += w;
        }
    }
    Ok(out)
}

/// Gradients of a dense layer.
///
/// `d_weights[o][k] = sum_b d_out[b][o] * [h[b]; 1][k]` with b ascending, so
/// the batch gradient is bitwise the sum of per-sample gradients.
/// `d_input[b][i] = sum_o d_out[b][o] * w[o][i]` with o ascending; the bias
/// column does not contribute.
pub fn dense_backward(p: &DenseParams, h_in: &Matrix, d_out: &Matrix) -> Result<DenseGrad> {
    check_width("dense_backward input", p.n_in(), h_in)?;
    check_width("dense_backward d_out", p.n_out(), d_out)?;
    if h_in.rows() != d_out.rows() {
        return Err(Error::shape(
            "dense_backward batch",
            h_in.shape_str(),
            d_out.shape_str(),
        ));
    }
    let (batch, n_in) = h_in.shape();
    let n_out = p.n_out();
    let mut d_weights = Matrix::zeros(n_out, n_in + 1);
    let mut d_input = Matrix::zeros(batch, n_in);
    for b in 0..batch {
        let h_row = h_in.row(b);
        let g_row = d_out.row(b);
        for o in 0..n_out {
            let g = g_row[o];
            let dw_row = d_weights.row_mut(o);
            for (dw, &hv) in dw_row[..n_in].iter_mut().zip(h_row) {
                *dw += g * hv;
            }
            dw_row[n_in] += g;
        }
        let di_row = d_input.row_mut(b);
        for (o, &g) in g_row.iter().enumerate() {
            let w_row = p.weights.row(o);
            for (di, &w) in di_row.iter_mut().zip(&w_row[..n_in]) {
                *di += g * w;
            }
        }
    }
    Ok(DenseGrad { d_weights, d_input })
}

/// Elementwise max(x, 0).
pub fn relu_apply(h: &Matrix) -> Matrix {
    let mut out = h.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient through ReLU given the pre-activation input. The subgradient at
/// exactly 0 is 0.
pub fn relu_backward(h_pre: &Matrix, d_out: &Matrix) -> Result<Matrix> {
    check_same_shape("relu_backward", h_pre, d_out)?;
    let mut d_in = d_out.clone();
    for (d, &x) in d_in.data_mut().iter_mut().zip(h_pre.data()) {
        if x <= 0.0 {
            *d = 0.0;
        }
    }
    Ok(d_in)
}

/// Per-sample L2 normalize, then per-channel scale:
/// `y[b][i] = gamma[i] * h[b][i] / max(||h[b]||_2, epsilon)`.
///
/// A sample with norm <= epsilon (in particular the zero vector) maps to the
/// zero-vector direction scaled by gamma, i.e. exactly zero for zero input.
pub fn normscale_forward(p: &NormScaleParams, h: &Matrix) -> Result<Matrix> {
    check_width("normscale_forward", p.width(), h)?;
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for b in 0..h.rows() {
        let row = h.row(b);
        let denom = row_norm(row).max(p.epsilon);
        for (i, (o, &hv)) in out.row_mut(b).iter_mut().zip(row).enumerate() {
            *o = p.gamma[i] * (hv / denom);
        }
    }
    Ok(out)
}

/// Gradients of normalize-and-scale.
///
/// With r = ||h[b]||_2 > epsilon and g = gamma (.) d_out[b]:
///   d_h[b]     = g / r - h[b] * (h[b] . g) / r^3
///   d_gamma[i] += d_out[b][i] * h[b][i] / r      (summed over b ascending)
/// Samples with r <= epsilon contribute zero input gradient; their d_gamma
/// contribution uses the forward's epsilon denominator.
pub fn normscale_backward(p: &NormScaleParams, h: &Matrix, d_out: &Matrix) -> Result<NormScaleGrad> {
    check_width("normscale_backward input", p.width(), h)?;
    check_same_shape("normscale_backward", h, d_out)?;
    let width = p.width();
    let mut d_gamma = vec![0.0; width];
    let mut d_input = Matrix::zeros(h.rows(), h.cols());
    for b in 0..h.rows() {
        let row = h.row(b);
        let g_row = d_out.row(b);
        let r = row_norm(row);
        if r <= p.epsilon {
            for i in 0..width {
                d_gamma[i] += g_row[i] * (row[i] / p.epsilon);
            }
            continue;
        }
        let mut dot = 0.0;
        for i in 0..width {
            dot += row[i] * (p.gamma[i] * g_row[i]);
        }
        let c = dot / (r * r * r);
        let di_row = d_input.row_mut(b);
        for i in 0..width {
            di_row[i] = p.gamma[i] * g_row[i] / r - row[i] * c;
            d_gamma[i] += g_row[i] * (row[i] / r);
        }
    }
    Ok(NormScaleGrad { d_gamma, d_input })
}

fn row_norm(row: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in row {
        s += v * v;
    }
    s.sqrt()
}

/// Column-wise concatenation of blocks sharing a batch dimension.
pub fn concat_forward(blocks: &[&Matrix]) -> Result<Matrix> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Config("concat needs at least one block".into()))?;
    let batch = first.rows();
    let mut total = 0;
    for blk in blocks {
        if blk.rows() != batch {
            return Err(Error::shape(
                "concat_forward",
                first.shape_str(),
                blk.shape_str(),
            ));
        }
        total += blk.cols();
    }
    let mut out = Matrix::zeros(batch, total);
    for b in 0..batch {
        let out_row = out.row_mut(b);
        let mut at = 0;
        for blk in blocks {
            let w = blk.cols();
            out_row[at..at + w].copy_from_slice(blk.row(b));
            at += w;
        }
    }
    Ok(out)
}

/// Splits an output gradient back into per-block gradients.
pub fn concat_backward(d_out: &Matrix, widths: &[usize]) -> Result<Vec<Matrix>> {
    let total: usize = widths.iter().sum();
    if total != d_out.cols() {
        return Err(Error::shape(
            "concat_backward",
            format!("widths summing to {total}"),
            d_out.shape_str(),
        ));
    }
    let batch = d_out.rows();
    let mut grads: Vec<Matrix> = widths.iter().map(|&w| Matrix::zeros(batch, w)).collect();
    for b in 0..batch {
        let row = d_out.row(b);
        let mut at = 0;
        for (g, &w) in grads.iter_mut().zip(widths) {
            g.row_mut(b).copy_from_slice(&row[at..at + w]);
            at += w;
        }
    }
    Ok(grads)
}

/// Softmax cross-entropy, mean-reduced over the batch.
///
/// Each row is shifted by its max before exponentiation, so extreme logits
/// cannot overflow. Returns the loss and `d_logits = (softmax - onehot) / batch`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::shape(
            "softmax_xent",
            logits.shape_str(),
            format!("{} labels", labels.len()),
        ));
    }
    if batch == 0 {
        return Err(Error::Domain("softmax_xent on an empty batch".into()));
    }
    let probs = softmax_rows(logits);
    let mut loss_sum = 0.0;
    let mut d_logits = Matrix::zeros(batch, classes);
    let inv_batch = 1.0 / batch as f64;
    for b in 0..batch {
        let y = labels[b];
        if y >= classes {
            return Err(Error::Domain(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = logits.row(b);
        let m = row_max(row);
        let mut sum = 0.0;
        for &l in row {
            sum += (l - m).exp();
        }
        loss_sum += sum.ln() - (row[y] - m);
        let d_row = d_logits.row_mut(b);
        for (i, (d, &p)) in d_row.iter_mut().zip(probs.row(b)).enumerate() {
            *d = (p - if i == y { 1.0 } else { 0.0 }) * inv_batch;
        }
    }
    Ok((loss_sum * inv_batch, d_logits))
}

/// Row-wise softmax with max-shift, used by `softmax_xent` and exposed for
/// evaluation-time probabilities.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for b in 0..logits.rows() {
        let row = logits.row(b);
        let m = row_max(row);
        let out_row = out.row_mut(b);
        let mut sum = 0.0;
        for (o, &l) in out_row.iter_mut().zip(row) {
            *o = (l - m).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

fn row_max(row: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        if v > m {
            m = v;
        }
    }
    m
}
