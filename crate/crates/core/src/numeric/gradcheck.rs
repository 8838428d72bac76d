//! Finite-difference check of tape gradients.

use rand::seq::index::sample;

use super::{NumericError, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`
    Central,
    /// Richardson-extrapolated central difference,
    /// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`.
    Central4,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub stencil: Stencil,
    /// Coordinates probed per tensor; smaller tensors are probed fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            stencil: Stencil::Central,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a − g_n| / max(1e-8, |g_a| + |g_n|)` over probed coordinates.
    pub max_rel_error: f64,
    /// Tensor index and flat coordinate where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    /// Analytic and numeric gradient at `worst`.
    pub worst_values: (f64, f64),
    pub probed: usize,
}

/// Checks the tape gradient of the scalar `f(params)` with step `h` and
/// default options.
pub fn grad_check<E, L>(params: &[Tensor<f64>], h: f64, f: L) -> Result<f64, E>
where
    E: From<NumericError>,
    L: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let opts = GradCheckOptions { h, ..Default::default() };
    grad_check_with(params, &opts, f).map(|r| r.max_rel_error)
}

pub fn grad_check_with<E, L>(
    params: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: L,
) -> Result<GradCheckReport, E>
where
    E: From<NumericError>,
    L: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(NumericError::NonFiniteGradient.into());
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        probed: 0,
    };
    for (ti, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= opts.samples_per_tensor {
            (0..p.len()).collect()
        } else {
            let mut r = rng::substream(opts.seed, rng::GRAD_CHECK, ti as u64);
            let mut c = sample(&mut r, p.len(), opts.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = p.data()[c];
            let mut at = |delta: f64| -> Result<f64, E> {
                work[ti].data_mut()[c] = orig + delta;
                let y = eval(&work);
                work[ti].data_mut()[c] = orig;
                y
            };
            let h = opts.h;
            let numeric = match opts.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::Central4 => {
                    let d1 = at(h)? - at(-h)?;
                    let d2 = at(2.0 * h)? - at(-2.0 * h)?;
                    (8.0 * d1 - d2) / (12.0 * h)
                }
            };
            if !numeric.is_finite() {
                return Err(NumericError::NonFiniteGradient.into());
            }
            let ga = analytic[ti].data()[c];
            let rel = (ga - numeric).abs() / (ga.abs() + numeric.abs()).max(1e-8);
            report.probed += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((ti, c));
                report.worst_values = (ga, numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::kernels::matmul;

    fn half_sq(tape: &mut Tape<f64>, v: &[Var]) -> Result<Var, NumericError> {
        let sq = tape.mul(v[0], v[0])?;
        let s = tape.sum(sq)?;
        tape.scale(s, 0.5)
    }

    #[test]
    fn half_squared_norm() {
        let theta = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.7]).unwrap();
        let err: f64 = grad_check(&[theta], 1e-5, half_sq).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err: f64 = grad_check(&[theta], 1e-5, |tape: &mut Tape<f64>, _v: &[Var]| {
            Ok::<_, NumericError>(tape.leaf(Tensor::scalar(4.0)))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_softmax_cross_entropy() {
        // 1-layer linear-softmax classifier on fixed inputs.
        let x = Tensor::new(vec![4, 3], vec![0.5, -1.0, 2.0, 1.5, 0.2, -0.3, -0.8, 0.9, 0.1, 0.0, 1.0, -1.0]).unwrap();
        let w = Tensor::from_fn(3, 5, |r, c| ((r * 5 + c) as f64 * 0.37).sin());
        let b = Tensor::new(vec![5], vec![0.1, -0.2, 0.0, 0.3, 0.05]).unwrap();
        let targets = [0usize, 3, 4, 1];
        let err: f64 = grad_check(&[w.clone(), b], 1e-5, |tape: &mut Tape<f64>, v: &[Var]| {
            let xv = tape.leaf(x.clone());
            let l = tape.matmul(xv, v[0])?;
            let l = tape.add_row(l, v[1])?;
            tape.cross_entropy(l, &targets, &[true, true, false, true])
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
        assert!(matmul(&x, &w).is_ok());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let a = Tensor::from_fn(3, 4, |r, c| ((r * 4 + c) as f64 * 0.71).cos());
        let b = Tensor::from_fn(4, 4, |r, c| ((r * 4 + c) as f64 * 1.3).sin() * 0.5);
        let g = Tensor::new(vec![4], vec![1.1, 0.9, 1.3, 0.7]).unwrap();
        let beta = Tensor::new(vec![4], vec![0.1, -0.1, 0.2, 0.0]).unwrap();
        let readout = std::rc::Rc::new(Tensor::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3 + 0.1));
        let mask = [true, false, true, true, true, true, false, true, true, true, true, false];
        let opts = GradCheckOptions { stencil: Stencil::Central4, h: 1e-3, ..Default::default() };
        let report = grad_check_with(&[a, b, g, beta], &opts, |tape: &mut Tape<f64>, v: &[Var]| {
            let h = tape.matmul(v[0], v[1])?;
            let h = tape.layer_norm(h, v[2], v[3], 1e-5)?;
            let h = tape.gelu(h)?;
            let s = tape.matmul_t(h, v[0])?;
            let s = tape.softmax(s, Some(&mask[..9]))?;
            let h2 = tape.matmul(s, v[0])?;
            let left = tape.slice_cols(h2, 0, 2)?;
            let right = tape.slice_cols(h, 2, 2)?;
            let cat = tape.concat_cols(&[left, right])?;
            let n = tape.l2_normalize_rows(cat, 1e-12)?;
            let stacked = tape.stack_rows(&[(n, 2), (n, 0), (v[0], 1)])?;
            let mean = tape.mean_rows(stacked)?;
            let ce = tape.cross_entropy(n, &[1, 3, 0], &[true, true, true])?;
            let w = tape.mul_const(h, readout.clone())?;
            let ws = tape.sum(w)?;
            let ms = tape.sum(mean)?;
            tape.weighted_sum(&[(ce, 0.7), (ws, 0.2), (ms, -1.5)])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
