//! Dense kernels. Loops run row-major in a fixed order so results are
//! bit-reproducible.

use super::{NumericError, Real, Tensor};

fn mismatch(op: &'static str, detail: String) -> NumericError {
    NumericError::ShapeMismatch { op, detail }
}

pub(crate) fn check_finite<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<(), NumericError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NumericError::NonFinite { op })
    }
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NumericError> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(mismatch("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![F::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_t<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NumericError> {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    if b.cols() != k {
        return Err(mismatch("matmul_t", format!("{:?} x {:?}ᵀ", a.shape(), b.shape())));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(b.row(j)) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn t_matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>, NumericError> {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(mismatch("t_matmul", format!("{:?}ᵀ x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![F::zero(); m * n];
    for p in 0..k {
        let (arow, brow) = (a.row(p), b.row(p));
        for (i, &x) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(logits: &Tensor<F>) -> Tensor<F> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), None);
    }
    out
}

/// Row-wise softmax over the entries where `visible` is true; hidden
/// entries get probability exactly zero.
pub fn softmax_rows_masked<F: Real>(
    logits: &Tensor<F>,
    visible: &[bool],
) -> Result<Tensor<F>, NumericError> {
    if visible.len() != logits.len() {
        return Err(mismatch(
            "softmax_rows_masked",
            format!("mask of {} for {:?}", visible.len(), logits.shape()),
        ));
    }
    let cols = logits.cols();
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let mask = &visible[r * cols..(r + 1) * cols];
        if !mask.iter().any(|&v| v) {
            return Err(NumericError::AllKeysMasked { row: r });
        }
        softmax_in_place(out.row_mut(r), Some(mask));
    }
    Ok(out)
}

fn softmax_in_place<F: Real>(row: &mut [F], mask: Option<&[bool]>) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let mut max = F::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if on(j) && x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if on(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = F::zero();
        }
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Log-softmax of one row.
pub fn log_softmax_row<F: Real>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Per-row normalisation (before the affine): returns the normalised rows
/// and each row's reciprocal standard deviation.
pub(crate) fn normalize_rows<F: Real>(x: &Tensor<F>, eps: f64) -> (Tensor<F>, Vec<F>) {
    let n = F::lit(x.cols() as f64);
    let eps = F::lit(eps);
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<F>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let s = F::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        rstd.push(s);
    }
    (out, rstd)
}

/// Layer normalisation over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>, NumericError> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(mismatch("layer_norm", format!("{:?} with affine {}", x.shape(), gamma.len())));
    }
    let (mut out, _) = normalize_rows(x, eps);
    for r in 0..out.rows() {
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = *v * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu_scalar<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    let u = F::lit(GELU_C) * (x + F::lit(GELU_A) * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let half = F::lit(0.5);
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::lit(3.0) * a * x * x)
}

pub fn gelu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(gelu_scalar)
}

/// Scaled dot-product attention `softmax(QKᵀ/√d + mask)·V`.
///
/// `visible` is a row-major `[q×n]` mask; hidden keys are excluded from the
/// softmax. A query row with no visible key is an error.
pub fn attention<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    visible: Option<&[bool]>,
) -> Result<Tensor<F>, NumericError> {
    if k.rows() != v.rows() {
        return Err(mismatch("attention", format!("K {:?} vs V {:?}", k.shape(), v.shape())));
    }
    let scale = F::one() / F::lit(q.cols() as f64).sqrt();
    let scores = matmul_t(q, k)?.map(|s| s * scale);
    let probs = match visible {
        Some(m) => softmax_rows_masked(&scores, m)?,
        None => softmax_rows(&scores),
    };
    let out = matmul(&probs, v)?;
    check_finite("attention", &out)?;
    Ok(out)
}

/// `-(Σ m_t log softmax(logits_t)[target_t]) / Σ m_t`.
pub fn cross_entropy_masked<F: Real>(
    logits: &Tensor<F>,
    targets: &[usize],
    mask: &[bool],
) -> Result<F, NumericError> {
    let (rows, v) = (logits.rows(), logits.cols());
    if targets.len() != rows || mask.len() != rows {
        return Err(mismatch(
            "cross_entropy",
            format!("{rows} rows, {} targets, {} mask", targets.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(NumericError::EmptyMask);
    }
    let mut total = F::zero();
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let t = targets[r];
        if t >= v {
            return Err(NumericError::TargetOutOfRange { target: t, classes: v });
        }
        total -= log_softmax_row(logits.row(r))[t];
    }
    let loss = total / F::lit(count as f64);
    if !loss.is_finite() {
        return Err(NumericError::NonFinite { op: "cross_entropy" });
    }
    Ok(loss)
}
